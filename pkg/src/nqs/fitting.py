"""Fitting the mode-sum loss model to observed scaling runs.

The pipeline: filter out wasteful large-batch runs, draw many initial
parameter guesses with a Latin hypercube, run Adam on every guess in a
smooth reparameterization (logs of the positive parameters), and keep the
best iterate ever visited. The objective is a Huber distance between log
predicted and log observed losses, robust to multiplicative noise.

The norm-feedback scale ``s`` is not part of the gradient fit: it is
selected afterwards by grid search on exactly the small-batch records the
filter removed (``select_s``), where its damping effect shows.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import _backend
from .core import nqs_loss, nqs_loss_layernorm
from .data import ScalingDataset
from .params import LayerNormConfig, NqsParams, RunConfig, UnstableDynamicsError

__all__ = [
    "DEFAULT_INIT_RANGES",
    "FitConfig",
    "FitFailureError",
    "FitReport",
    "anchor_s_grid",
    "bootstrap_ci",
    "filter_small_batch",
    "fit_nqs",
    "huber",
    "latin_hypercube",
    "nqs_objective",
    "select_s",
]


class FitFailureError(ValueError):
    """Every initialization ended in the penalty region; no usable fit."""

    def __init__(self, n_inits: int, min_objective: float, penalty: float):
        self.n_inits = n_inits
        self.min_objective = min_objective
        self.penalty = penalty
        super().__init__(
            f"all {n_inits} initializations ended in the penalty region "
            f"(best objective {min_objective:g} with penalty {penalty:g}); "
            "the data may be inconsistent with the model or the init ranges too narrow"
        )

# Initial-guess ranges; R is sampled through its square root.
DEFAULT_INIT_RANGES: Dict[str, Tuple[float, float]] = {
    "p": (1.05, 2.5),
    "P": (10.0, 100.0),
    "q": (0.6, 2.5),
    "Q": (0.05, 20.0),
    "r": (0.6, 2.5),
    "sqrt_R": (0.1, 10.0),
    "e_irr": (1.0, 1.5),
}


@dataclass(frozen=True)
class FitConfig:
    """Multi-start Adam settings for the 7-parameter fit."""

    n_inits: int = 1000
    n_iters: int = 5000
    lr: float = 1e-2
    clip: float = 1.0
    huber_delta: float = 1e-3
    penalty: float = 1e6
    objective: str = "huber"  # or "mse"
    seed: int = 0
    init_ranges: Mapping[str, Tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_INIT_RANGES)
    )
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    small_batch_margin: float = 0.05
    threads: Optional[int] = None

    def __post_init__(self):
        if self.objective not in ("huber", "mse"):
            raise ValueError(f"unknown objective kind {self.objective!r}")
        if set(self.init_ranges) != set(DEFAULT_INIT_RANGES):
            raise ValueError(
                "init_ranges must provide exactly the keys "
                f"{sorted(DEFAULT_INIT_RANGES)}"
            )
        if self.n_inits < 1 or self.n_iters < 1:
            raise ValueError("n_inits and n_iters must be positive")
        if self.clip <= 0.0:
            raise ValueError("clip must be positive")
        if self.huber_delta <= 0.0:
            raise ValueError("huber_delta must be positive")

    @property
    def kind(self) -> int:
        return _backend.KIND_HUBER if self.objective == "huber" else _backend.KIND_MSE

    def resolve_threads(self) -> int:
        if self.threads is not None:
            return max(1, self.threads)
        return max(1, int(os.environ.get("NQS_THREADS", "1")))


@dataclass(frozen=True)
class FitReport:
    """Everything the fit decided, plus enough diagnostics to audit it."""

    theta: NqsParams
    objective: float
    best_index: int
    best_iteration: int
    init_objectives: np.ndarray
    filtered_indices: Tuple[int, ...]
    n_records_used: int
    backend: str
    config: FitConfig
    selected_s: Optional[float] = None
    s_curve: Optional[Tuple[Tuple[float, float], ...]] = None

    def to_dict(self) -> dict:
        cfg = {
            **{k: getattr(self.config, k) for k in (
                "n_inits", "n_iters", "lr", "clip", "huber_delta", "penalty",
                "objective", "seed", "beta1", "beta2", "adam_eps", "small_batch_margin",
            )},
            "init_ranges": {k: list(v) for k, v in self.config.init_ranges.items()},
        }
        out = {
            "version": 1,
            "kind": "nqs_fit",
            "theta": {k: getattr(self.theta, k) for k in NqsParams.FIELDS},
            "objective": self.objective,
            "diagnostics": {
                "best_index": self.best_index,
                "best_iteration": self.best_iteration,
                "init_objectives": [float(x) for x in self.init_objectives],
                "filtered_indices": list(self.filtered_indices),
                "n_records_used": self.n_records_used,
                "backend": self.backend,
            },
            "config": cfg,
        }
        if self.selected_s is not None:
            out["selected_s"] = self.selected_s
            out["s_curve"] = [[float(s), float(o)] for s, o in self.s_curve]
        return out


def huber(x, y, delta: float = 1e-3):
    """Huber distance between x and y: quadratic within delta, linear beyond."""
    res = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    out = np.where(
        np.abs(res) <= delta, 0.5 * res * res, delta * (np.abs(res) - 0.5 * delta)
    )
    return float(out) if np.ndim(out) == 0 else out


def latin_hypercube(ranges: Sequence[Tuple[float, float]], n_samples: int, seed: int) -> np.ndarray:
    """Stratified uniform draws: each dimension hits all n strata exactly once."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    ranges = list(ranges)
    out = np.empty((n_samples, len(ranges)))
    for j, (lo, hi) in enumerate(ranges):
        if not hi > lo:
            raise ValueError(f"range {j} is empty: ({lo}, {hi})")
        strata = rng.permutation(n_samples)
        u = (strata + rng.random(n_samples)) / n_samples
        out[:, j] = lo + u * (hi - lo)
    return out


def _small_batch_mask(data: ScalingDataset, margin: float) -> np.ndarray:
    """True where a record is kept; False where a half-batch twin beats it."""
    by_key: Dict[Tuple[int, int, int, int], float] = {}
    for rec in data:
        key = (rec.n_params, rec.batch, rec.steps, rec.seq_len)
        by_key[key] = max(by_key.get(key, -np.inf), rec.loss)
    keep = np.ones(len(data), dtype=bool)
    for j, rec in enumerate(data):
        if rec.batch % 2:
            continue
        twin = by_key.get((rec.n_params, rec.batch // 2, 2 * rec.steps, rec.seq_len))
        if twin is not None and twin > rec.loss - margin:
            keep[j] = False
    return keep


def filter_small_batch(
    data: ScalingDataset, margin: float = 0.05
) -> Tuple[ScalingDataset, ScalingDataset]:
    """Drop runs whose batch is past the useful point.

    A record goes when halving its batch and doubling its steps (same
    model, same tokens) is already on file and loses at most ``margin``
    more loss; such runs spend compute without buying loss and would
    otherwise anchor the noise term badly.
    """
    keep = _small_batch_mask(data, margin)
    kept = ScalingDataset(tuple(r for r, k in zip(data, keep) if k), dict(data.meta))
    removed = ScalingDataset(tuple(r for r, k in zip(data, keep) if not k), dict(data.meta))
    return kept, removed


def nqs_objective(
    theta: NqsParams,
    data: ScalingDataset,
    delta: float = 1e-3,
    penalty: float = 1e6,
    kind: str = "huber",
    ln: Optional[LayerNormConfig] = None,
) -> float:
    """Mean log-space misfit of the closed-form model on a dataset.

    Records whose evaluation diverges or predicts a non-positive loss
    contribute the flat ``penalty``. Pass ``ln`` to evaluate through the
    norm-feedback model instead of the plain one.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate an objective on an empty dataset")
    total = 0.0
    for j, rec in enumerate(data):
        if rec.loss <= 0:
            raise ValueError(f"record {j} has non-positive loss {rec.loss!r}")
        try:
            pred = (
                nqs_loss_layernorm(theta, rec.run, ln) if ln is not None
                else nqs_loss(theta, rec.run)
            )
        except UnstableDynamicsError:
            total += penalty
            continue
        if not (pred > 0 and math.isfinite(pred)):
            total += penalty
            continue
        res = math.log(pred) - math.log(rec.loss)
        if kind == "huber":
            total += huber(res, 0.0, delta)
        else:
            total += res * res
    return total / len(data)


def _theta0_from_draws(draws: np.ndarray, keys: Sequence[str]) -> np.ndarray:
    cols = {k: draws[:, j] for j, k in enumerate(keys)}
    theta0 = np.column_stack(
        [cols["p"], cols["P"], cols["q"], cols["Q"], cols["r"], cols["sqrt_R"] ** 2,
         cols["e_irr"]]
    )
    return theta0


def fit_nqs(data: ScalingDataset, config: Optional[FitConfig] = None) -> FitReport:
    """Fit the 7 model parameters to a dataset with multi-start Adam."""
    config = config or FitConfig()
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    keep = _small_batch_mask(data, config.small_batch_margin)
    kept = [r for r, k in zip(data, keep) if k]
    if not kept:
        raise ValueError("small-batch filtering removed every record")
    if len(kept) < 7:
        warnings.warn(
            f"fitting 7 parameters to {len(kept)} records; "
            "at least 7 are recommended",
            stacklevel=2,
        )

    draws = latin_hypercube(
        list(config.init_ranges.values()), config.n_inits, config.seed
    )
    theta0 = _theta0_from_draws(draws, list(config.init_ranges.keys()))
    z0 = _backend.z_from_theta(theta0)
    pack = _backend.build_pack(
        [(r.n_params, r.batch, r.steps) for r in kept], [r.loss for r in kept]
    )
    best_z, best_obj, best_iter = _backend.adam_fit(
        z0,
        pack,
        n_iters=config.n_iters,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        adam_eps=config.adam_eps,
        clip=config.clip,
        delta=config.huber_delta,
        penalty=config.penalty,
        kind=config.kind,
        threads=config.resolve_threads(),
    )
    winner = int(np.argmin(best_obj))
    # The penalty enters as a per-record mean, so any iterate with at least
    # one diverged record scores >= penalty / m; a usable fit must have found
    # some iterate below that.
    if best_obj[winner] >= config.penalty / len(kept):
        raise FitFailureError(config.n_inits, float(best_obj[winner]), config.penalty)
    theta = NqsParams.from_array(_backend.theta_from_z(best_z[winner]))
    return FitReport(
        theta=theta,
        objective=float(best_obj[winner]),
        best_index=winner,
        best_iteration=int(best_iter[winner]),
        init_objectives=best_obj,
        filtered_indices=tuple(int(i) for i in np.nonzero(~keep)[0]),
        n_records_used=len(kept),
        backend=_backend.backend_name(),
        config=config,
    )


def anchor_s_grid(n_params: int, halvings: int = 4, scale: float = 0.02) -> np.ndarray:
    """Geometric grid of candidate s values around the weight-scale anchor.

    The anchor takes every parameter to sit at the typical initialization
    scale ``scale``, giving ||w||^2 of about n_params * scale**2.
    """
    s0 = n_params * scale * scale
    return s0 * 2.0 ** np.arange(-halvings, halvings + 1, dtype=float)


def select_s(
    theta: NqsParams,
    small_batch_data: ScalingDataset,
    s_grid: Sequence[float],
    ln_template: Optional[LayerNormConfig] = None,
) -> Tuple[float, Tuple[Tuple[float, float], ...]]:
    """Pick the norm-feedback constant by grid search on small-batch runs.

    Returns the best s and the full (s, objective) curve; ties go to the
    smaller s.
    """
    if len(small_batch_data) == 0:
        raise ValueError("select_s needs at least one record")
    s_grid = [float(s) for s in s_grid]
    if not s_grid:
        raise ValueError("s_grid must be nonempty")
    tmpl = ln_template or LayerNormConfig(s=1.0)
    curve: List[Tuple[float, float]] = []
    best_s, best_obj = None, np.inf
    for s in sorted(s_grid):
        ln = LayerNormConfig(
            s=s,
            gamma_init=tmpl.gamma_init,
            n_segments=tmpl.n_segments,
            mode_grid_size=tmpl.mode_grid_size,
        )
        obj = nqs_objective(theta, small_batch_data, ln=ln)
        curve.append((s, obj))
        if obj < best_obj:
            best_s, best_obj = s, obj
    return best_s, tuple(curve)


def bootstrap_ci(
    data: ScalingDataset,
    config: FitConfig,
    queries: Sequence[RunConfig],
    trials: int = 100,
    frac: float = 0.5,
    level: float = 0.9,
) -> List[Tuple[float, float]]:
    """Subsample-refit confidence intervals for predicted losses.

    Each trial refits on a random ``frac`` of the records (without
    replacement) and predicts every query; the interval is the central
    ``level`` quantile band over trials.
    """
    if not 0 < frac < 1:
        raise ValueError("frac must be in (0, 1)")
    if not 0 <= level <= 1:
        raise ValueError("level must be in [0, 1]")
    if trials < 2:
        raise ValueError("need at least two trials")
    m = len(data)
    take = max(1, math.ceil(frac * m))
    samples = np.full((trials, len(queries)), np.nan)
    for t in range(trials):
        rng = np.random.default_rng([config.seed, 0xB001, t])
        idx = np.sort(rng.choice(m, size=take, replace=False))
        sub = ScalingDataset(tuple(data[int(i)] for i in idx))
        try:
            # Refit with the caller's config unchanged: a trial's outcome
            # depends only on which records it drew.
            theta_t = fit_nqs(sub, config).theta
        except ValueError:
            continue  # e.g. the subsample was entirely filtered away
        for j, run in enumerate(queries):
            try:
                samples[t, j] = nqs_loss(theta_t, run)
            except UnstableDynamicsError:
                pass
    alpha = 0.5 * (1.0 - level)
    with np.errstate(invalid="ignore"):
        lo = np.nanquantile(samples, alpha, axis=0)
        hi = np.nanquantile(samples, 1.0 - alpha, axis=0)
    return [(float(a), float(b)) for a, b in zip(lo, hi)]
