"""Parametric-form baseline: loss as a sum of two power laws.

The baseline models loss as e_irr + P/N^(p-1) + Q/D^((p-1)/q) where N is
the parameter count and D the token count. It shares the fitting recipe
with the main model (Huber on log losses, Latin-hypercube multi-start,
Adam in a smooth reparameterization) and adds a compute-optimal split of a
FLOP budget between N and D.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .data import ScalingDataset
from .fitting import huber, latin_hypercube

__all__ = [
    "CHIN_DEFAULT_INIT_RANGES",
    "ChinFitConfig",
    "ChinFitReport",
    "ChinParams",
    "chin_fit",
    "chin_loss",
    "chin_optimal_nd",
]

# Draw ranges for the multi-start; log_P and log_Q are natural logs.
CHIN_DEFAULT_INIT_RANGES: Dict[str, Tuple[float, float]] = {
    "p": (1.05, 2.5),
    "q": (0.3, 2.5),
    "log_P": (-1.0, 5.0),
    "log_Q": (-1.0, 5.0),
    "e_irr": (0.0, 3.0),
}


@dataclass(frozen=True)
class ChinParams:
    """Two-power-law parameters (p, P, q, Q, e_irr).

    P or Q may be zero to switch a term off (the degenerate single-law
    forms); the exponents p-1 and (p-1)/q stay positive.
    """

    p: float
    P: float
    q: float
    Q: float
    e_irr: float

    FIELDS = ("p", "P", "q", "Q", "e_irr")

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p!r}")
        if not self.q > 0:
            raise ValueError(f"q must be positive, got {self.q!r}")
        for name in ("P", "Q", "e_irr"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.P, self.q, self.Q, self.e_irr], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ChinParams":
        p, P, q, Q, e = (float(x) for x in arr)
        return cls(p=p, P=P, q=q, Q=Q, e_irr=e)


def chin_loss(phi: ChinParams, n_params: float, tokens: float) -> float:
    """Predicted loss of a model with n_params weights trained on tokens."""
    if not n_params >= 1 or not tokens >= 1:
        raise ValueError("n_params and tokens must be at least 1")
    a = phi.p - 1.0
    return float(
        phi.e_irr
        + phi.P * math.exp(-a * math.log(n_params))
        + phi.Q * math.exp(-(a / phi.q) * math.log(tokens))
    )


@dataclass(frozen=True)
class ChinFitConfig:
    """Multi-start Adam settings for the 5-parameter baseline fit."""

    n_inits: int = 1000
    n_iters: int = 2000
    lr: float = 2e-2
    clip: float = 1.0
    huber_delta: float = 1e-3
    objective: str = "huber"  # or "mse"
    seed: int = 0
    init_ranges: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(CHIN_DEFAULT_INIT_RANGES)
    )
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    refine: bool = True  # quasi-Newton pass on the leading candidates
    refine_top: int = 16  # how many leading candidates get the pass

    def __post_init__(self):
        if self.objective not in ("huber", "mse"):
            raise ValueError(f"unknown objective kind {self.objective!r}")
        if set(self.init_ranges) != set(CHIN_DEFAULT_INIT_RANGES):
            raise ValueError(
                "init_ranges must provide exactly the keys "
                f"{sorted(CHIN_DEFAULT_INIT_RANGES)}"
            )


@dataclass(frozen=True)
class ChinFitReport:
    phi: ChinParams
    objective: float
    best_index: int
    init_objectives: np.ndarray
    refined: bool
    n_records: int
    config: ChinFitConfig

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "kind": "chinchilla_fit",
            "phi": {k: getattr(self.phi, k) for k in ChinParams.FIELDS},
            "objective": self.objective,
            "diagnostics": {
                "best_index": self.best_index,
                "init_objectives": [float(x) for x in self.init_objectives],
                "refined": self.refined,
                "n_records": self.n_records,
            },
            "config": {
                **{k: getattr(self.config, k) for k in (
                    "n_inits", "n_iters", "lr", "clip", "huber_delta",
                    "objective", "seed", "refine",
                )},
                "init_ranges": {k: list(v) for k, v in self.config.init_ranges.items()},
            },
        }


# z = [log(p-1), log P, log q, log Q, sqrt_e]; e_irr = sqrt_e**2 keeps the
# floor non-negative without a hard bound.
def _phi_from_z(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    out[..., 0] = 1.0 + np.exp(z[..., 0])
    out[..., 1] = np.exp(z[..., 1])
    out[..., 2] = np.exp(z[..., 2])
    out[..., 3] = np.exp(z[..., 3])
    out[..., 4] = z[..., 4] ** 2
    return out


def _z_from_phi(phi_arr: np.ndarray) -> np.ndarray:
    phi_arr = np.asarray(phi_arr, dtype=float)
    out = np.empty_like(phi_arr)
    out[..., 0] = np.log(phi_arr[..., 0] - 1.0)
    out[..., 1] = np.log(phi_arr[..., 1])
    out[..., 2] = np.log(phi_arr[..., 2])
    out[..., 3] = np.log(phi_arr[..., 3])
    out[..., 4] = np.sqrt(phi_arr[..., 4])
    return out


def _chin_objective_batch(Z, ln_n, ln_d, log_loss, delta, kind):
    """Objective and z-gradient for a batch of candidates.

    Z is (M, 5); returns obj (M,) and grad (M, 5). Candidates whose terms
    overflow produce non-finite rows; the caller's best-iterate tracking
    discards them, so the numerical warnings are suppressed here.
    """
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        a = np.exp(Z[:, 0])[:, None]  # p - 1
        q = np.exp(Z[:, 2])[:, None]
        t1 = np.exp(Z[:, 1][:, None] - a * ln_n[None, :])
        t2 = np.exp(Z[:, 3][:, None] - (a / q) * ln_d[None, :])
        pred = Z[:, 4][:, None] ** 2 + t1 + t2
        res = np.log(pred) - log_loss[None, :]
        if kind == "huber":
            small = np.abs(res) <= delta
            contrib = np.where(small, 0.5 * res * res, delta * (np.abs(res) - 0.5 * delta))
            dres = np.where(small, res, delta * np.sign(res))
        else:
            contrib = res * res
            dres = 2.0 * res
        m = ln_n.size
        scale = dres / pred / m
        grad = np.empty((Z.shape[0], 5))
        grad[:, 0] = np.sum(scale * (-t1 * a * ln_n - t2 * (a / q) * ln_d), axis=1)
        grad[:, 1] = np.sum(scale * t1, axis=1)
        grad[:, 2] = np.sum(scale * t2 * (a / q) * ln_d, axis=1)
        grad[:, 3] = np.sum(scale * t2, axis=1)
        grad[:, 4] = np.sum(scale, axis=1) * 2.0 * Z[:, 4]
        return contrib.mean(axis=1), grad


def chin_fit(data: ScalingDataset, config: Optional[ChinFitConfig] = None) -> ChinFitReport:
    """Fit the baseline to (n_params, tokens, loss) triples."""
    config = config or ChinFitConfig()
    if len(data) < len(ChinParams.FIELDS):
        raise ValueError(
            f"underdetermined: {len(data)} records for {len(ChinParams.FIELDS)} parameters"
        )
    for j, rec in enumerate(data):
        if not (math.isfinite(rec.loss) and rec.loss > 0):
            raise ValueError(f"record {j} has unusable loss {rec.loss!r}")
    ln_n = np.array([math.log(rec.n_params) for rec in data])
    ln_d = np.array([math.log(rec.tokens) for rec in data])
    log_loss = np.array([math.log(rec.loss) for rec in data])

    keys = list(config.init_ranges.keys())
    draws = latin_hypercube(list(config.init_ranges.values()), config.n_inits, config.seed)
    cols = {k: draws[:, j] for j, k in enumerate(keys)}
    Z = np.column_stack([
        np.log(cols["p"] - 1.0), cols["log_P"], np.log(cols["q"]), cols["log_Q"],
        np.sqrt(cols["e_irr"]),
    ])

    m1 = np.zeros_like(Z)
    m2 = np.zeros_like(Z)
    best_obj = np.full(Z.shape[0], np.inf)
    best_z = Z.copy()
    for it in range(config.n_iters + 1):
        obj, grad = _chin_objective_batch(
            Z, ln_n, ln_d, log_loss, config.huber_delta, config.objective
        )
        improved = obj < best_obj
        best_obj[improved] = obj[improved]
        best_z[improved] = Z[improved]
        if it == config.n_iters:
            break
        np.clip(grad, -config.clip, config.clip, out=grad)
        m1 = config.beta1 * m1 + (1.0 - config.beta1) * grad
        m2 = config.beta2 * m2 + (1.0 - config.beta2) * grad * grad
        hat1 = m1 / (1.0 - config.beta1 ** (it + 1))
        hat2 = m2 / (1.0 - config.beta2 ** (it + 1))
        Z -= config.lr * hat1 / (np.sqrt(hat2) + config.adam_eps)

    winner = int(np.argmin(best_obj))
    z_star = best_z[winner]
    obj_star = float(best_obj[winner])
    refined = False
    if config.refine:
        from scipy.optimize import minimize

        def fun(z):
            o, g = _chin_objective_batch(
                z[None, :], ln_n, ln_d, log_loss, config.huber_delta, config.objective
            )
            return o[0], g[0]

        polish_opts = {"maxiter": 1000, "ftol": 1e-18, "gtol": 1e-14}
        for idx in np.argsort(best_obj)[: max(1, config.refine_top)]:
            res = minimize(fun, best_z[idx], jac=True, method="L-BFGS-B", options=polish_opts)
            if np.isfinite(res.fun) and res.fun < obj_star:
                z_star, obj_star, refined = res.x, float(res.fun), True
                winner = int(idx)

    phi = ChinParams.from_array(_phi_from_z(z_star))
    return ChinFitReport(
        phi=phi,
        objective=obj_star,
        best_index=winner,
        init_objectives=best_obj,
        refined=refined,
        n_records=len(data),
        config=config,
    )


def chin_optimal_nd(phi: ChinParams, compute: float, seq_len: int = 1) -> Tuple[float, float]:
    """Split a FLOP budget between model size and tokens.

    Minimizes chin_loss subject to 6*N*D = compute by golden-section search
    over log N (tolerance 1e-6), with N >= 1 and D >= 1. Returns real-valued
    (N, D). seq_len does not move the optimum (the budget fixes tokens, not
    steps); it is accepted so callers can carry one config object around.
    Degenerate parameters (P or Q zero) push everything to one side and
    emit a warning.
    """
    del seq_len
    if not compute >= 6.0:
        raise ValueError("compute budget must cover at least one weight and token")
    hi = math.log(compute / 6.0)
    if phi.P == 0.0 and phi.Q == 0.0:
        warnings.warn("constant model: any split is optimal, returning the balanced one")
        n = math.exp(0.5 * hi)
        return n, compute / (6.0 * n)
    if phi.P == 0.0:
        warnings.warn("P = 0: all compute goes to tokens")
        return 1.0, compute / 6.0
    if phi.Q == 0.0:
        warnings.warn("Q = 0: all compute goes to parameters")
        return compute / 6.0, 1.0

    a = phi.p - 1.0
    b = a / phi.q
    ln_c6 = hi

    def g(x: float) -> float:
        # loss along the constraint, as a function of x = log N
        return phi.P * math.exp(-a * x) + phi.Q * math.exp(-b * (ln_c6 - x))

    lo = 0.0
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    g1, g2 = g(x1), g(x2)
    while hi - lo > 1e-6:
        if g1 < g2:
            hi, x2, g2 = x2, x1, g1
            x1 = hi - invphi * (hi - lo)
            g1 = g(x1)
        else:
            lo, x1, g1 = x1, x2, g2
            x2 = lo + invphi * (hi - lo)
            g2 = g(x2)
    x = 0.5 * (lo + hi)
    n = math.exp(x)
    return n, compute / (6.0 * n)
