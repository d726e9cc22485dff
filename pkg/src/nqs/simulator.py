"""Stochastic and deterministic simulation of the mode dynamics.

Two simulators live here, deliberately built from primitive per-mode
arithmetic (plain numpy powers, mpmath zeta tails) so they are
independent of the fast closed-form evaluators and can referee them:

* ``recurrence_trajectory``: the exact expectation dynamics. Per mode it
  tracks the surviving displacement fraction F and noise second moment V
  step by step, and reads out loss and expected weight norm after every
  step.
* ``simulate_run`` / ``simulate_layernorm_run``: Monte-Carlo trials of
  the stochastic update delta <- (1 - gamma*Q/n^q)*delta + gamma*noise,
  with counter-based RNG streams so results are reproducible.

Synthetic scaling datasets (IsoFLOPs sweeps and fixed-token batch/step
planes) are generated here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import mpmath
import numpy as np

from .core import appx_error, nqs_loss
from .data import ScalingDataset, ScalingRecord
from .params import LayerNormConfig, LrSchedule, NqsParams, RunConfig, UnstableDynamicsError

__all__ = [
    "DatasetDesign",
    "SimConfig",
    "SimResult",
    "SimTrajectory",
    "generate_synthetic_dataset",
    "make_batch_rule",
    "recurrence_trajectory",
    "simulate_layernorm_run",
    "simulate_run",
]

_MASK64 = (1 << 64) - 1
_KEY_SALT = 0x9E3779B97F4A7C15


@lru_cache(maxsize=1024)
def _reference_tail(p: float, n_params: int) -> float:
    """sum_{n > N} n**-p via mpmath (independent of the fast zeta_tail)."""
    return float(mpmath.zeta(p, n_params + 1))


def _mode_arrays(theta: NqsParams, n_modes: int):
    """Curvature, initial displacement and unit-batch noise power per mode."""
    ns = np.arange(1, n_modes + 1, dtype=float)
    lam = theta.Q * ns**-theta.q
    disp = 2.0 * (theta.P / theta.Q) * ns ** (theta.q - theta.p)
    noise = 2.0 * theta.R * ns**-theta.r
    return lam, disp, noise


def _rng_block(seed: int, hi: int, lo: int) -> np.random.Generator:
    """A fresh generator for one counter block of the Philox stream."""
    key = np.array([seed & _MASK64, _KEY_SALT], dtype=np.uint64)
    counter = np.array([0, 0, hi, lo], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


# ---------------------------------------------------------------------------
# Deterministic expectation recurrence (the reference implementation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimTrajectory:
    """Step-indexed expectations: losses[k] and norms[k] after k steps."""

    losses: np.ndarray
    norms: Optional[np.ndarray]
    gammas: np.ndarray
    mode_f: Optional[np.ndarray] = None
    mode_v: Optional[np.ndarray] = None


def recurrence_trajectory(
    theta: NqsParams,
    n_params: int,
    batch: int,
    steps: int,
    gammas=None,
    ln: Optional[LayerNormConfig] = None,
    s: Optional[float] = None,
    keep_modes: bool = False,
) -> SimTrajectory:
    """Run the expectation dynamics step by step and record every readout.

    ``gammas`` may be a scalar or per-step array; when ``ln`` is given the
    step scale is instead recomputed every step from the current expected
    weight norm (per-step normalization feedback) and ``ln.s`` is used as
    the constant-mass norm contribution.
    """
    if ln is not None and gammas is not None:
        raise ValueError("pass either explicit gammas or normalization feedback, not both")
    if ln is not None:
        s = ln.s
    if gammas is None:
        gam = np.ones(steps)
    else:
        gam = np.broadcast_to(np.asarray(gammas, dtype=float), (steps,)).copy()
    if ln is None and steps > 0 and float(np.max(gam, initial=0.0)) * theta.Q >= 2.0:
        raise UnstableDynamicsError(float(np.max(gam)), theta.Q)

    lam, disp, noise = _mode_arrays(theta, n_params)
    sig2 = noise / batch
    tail = theta.P * _reference_tail(theta.p, n_params)

    F = np.ones(n_params)
    V = np.zeros(n_params)
    losses = np.empty(steps + 1)
    norms = np.empty(steps + 1) if s is not None else None
    mode_f = np.empty((steps + 1, n_params)) if keep_modes else None
    mode_v = np.empty((steps + 1, n_params)) if keep_modes else None

    def readout(k: int) -> None:
        losses[k] = theta.e_irr + tail + float(np.sum(0.5 * lam * (F * F * disp + V)))
        if norms is not None:
            norms[k] = s + float(np.sum((1.0 - F) ** 2 * disp + V))
        if keep_modes:
            mode_f[k] = F
            mode_v[k] = V

    readout(0)
    for k in range(steps):
        if ln is not None:
            gam[k] = ln.gamma_init * ln.s / norms[k]
        if gam[k] * theta.Q >= 2.0:
            raise UnstableDynamicsError(float(gam[k]), theta.Q)
        rho = 1.0 - gam[k] * lam
        V = rho * rho * V + (gam[k] * gam[k]) * sig2
        F = rho * F
        readout(k + 1)

    return SimTrajectory(losses, norms, gam, mode_f, mode_v)


# ---------------------------------------------------------------------------
# Monte-Carlo trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Settings for a batch of Monte-Carlo training trials."""

    theta: NqsParams
    run: RunConfig
    trials: int = 1000
    seed: int = 0
    s: Optional[float] = None
    schedule: Optional[LrSchedule] = None
    ln: Optional[LayerNormConfig] = None
    feedback: str = "oracle"  # gamma source for layernorm runs: oracle | empirical
    latent_modes: Optional[int] = None  # modes sampled beyond N; default 4*N
    keep_trials: bool = False

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError("need at least two trials for a standard error")
        if self.feedback not in ("oracle", "empirical"):
            raise ValueError(f"unknown feedback mode {self.feedback!r}")
        if self.latent_modes is not None and self.latent_modes < self.run.n_params:
            raise ValueError("latent_modes must be at least the trained mode count")


@dataclass(frozen=True)
class SimResult:
    """Trial statistics: means and standard errors of loss and squared norm."""

    loss_mean: float
    loss_stderr: float
    norm_mean: Optional[float]
    norm_stderr: Optional[float]
    trials: int
    gammas: Optional[np.ndarray] = None
    losses: Optional[np.ndarray] = None
    norms: Optional[np.ndarray] = None


def _per_step_gammas(cfg: SimConfig) -> np.ndarray:
    steps = cfg.run.steps
    if cfg.schedule is None:
        return np.ones(steps)
    if cfg.schedule.total_steps != steps:
        raise ValueError(
            f"schedule covers {cfg.schedule.total_steps} steps but the run has {steps}"
        )
    return np.concatenate([np.full(t, g) for t, g in cfg.schedule])


def _simulate(cfg: SimConfig, mode: str) -> SimResult:
    theta, run = cfg.theta, cfg.run
    n_train = run.n_params
    n_total = cfg.latent_modes if cfg.latent_modes is not None else 4 * n_train
    lam, disp, noise = _mode_arrays(theta, n_total)
    step_sd = np.sqrt(noise[:n_train] / run.batch)

    if mode == "plain":
        gammas = _per_step_gammas(cfg)
        if run.steps > 0 and float(np.max(gammas, initial=0.0)) * theta.Q >= 2.0:
            raise UnstableDynamicsError(float(np.max(gammas)), theta.Q)
    elif mode == "oracle":
        ref = recurrence_trajectory(theta, n_train, run.batch, run.steps, ln=cfg.ln)
        gammas = ref.gammas
    else:  # empirical feedback, computed per trial inside the loop
        gammas = np.empty(run.steps)

    delta0 = _rng_block(cfg.seed, 1, 0).standard_normal((cfg.trials, n_total))
    delta0 *= np.sqrt(disp)
    delta = delta0.copy()
    ln = cfg.ln

    for k in range(run.steps):
        draws = _rng_block(cfg.seed, 0, k).standard_normal((cfg.trials, n_train))
        if mode == "empirical":
            norm_now = ln.s + np.sum((delta[:, :n_train] - delta0[:, :n_train]) ** 2, axis=1)
            gam = ln.gamma_init * ln.s / norm_now
            if float(np.max(gam)) * theta.Q >= 2.0:
                raise UnstableDynamicsError(float(np.max(gam)), theta.Q)
            gammas[k] = float(np.mean(gam))
            gam = gam[:, None]
        else:
            gam = gammas[k]
        delta[:, :n_train] = (1.0 - gam * lam[:n_train]) * delta[:, :n_train] + (
            gam * step_sd
        ) * draws

    const = theta.e_irr + appx_error(theta, n_total)
    losses = const + 0.5 * (delta * delta) @ lam
    loss_mean = float(np.mean(losses))
    loss_stderr = float(np.std(losses, ddof=1) / math.sqrt(cfg.trials))

    norm_mean = norm_stderr = None
    norms = None
    s = ln.s if ln is not None else cfg.s
    if s is not None:
        norms = s + np.sum((delta[:, :n_train] - delta0[:, :n_train]) ** 2, axis=1)
        norm_mean = float(np.mean(norms))
        norm_stderr = float(np.std(norms, ddof=1) / math.sqrt(cfg.trials))

    return SimResult(
        loss_mean=loss_mean,
        loss_stderr=loss_stderr,
        norm_mean=norm_mean,
        norm_stderr=norm_stderr,
        trials=cfg.trials,
        gammas=gammas if run.steps else np.zeros(0),
        losses=losses if cfg.keep_trials else None,
        norms=norms if (cfg.keep_trials and norms is not None) else None,
    )


def simulate_run(cfg: SimConfig) -> SimResult:
    """Monte-Carlo trials of a plain (optionally scheduled) run."""
    return _simulate(cfg, "plain")


def simulate_layernorm_run(cfg: SimConfig) -> SimResult:
    """Monte-Carlo trials with normalization feedback on the step scale.

    ``cfg.feedback`` picks where the feedback signal comes from: "oracle"
    uses the closed-form expected norm (shared by all trials),
    "empirical" uses each trial's own realized norm.
    """
    if cfg.ln is None:
        raise ValueError("simulate_layernorm_run needs cfg.ln")
    if cfg.schedule is not None:
        raise ValueError("normalization feedback and an explicit schedule are exclusive")
    return _simulate(cfg, cfg.feedback)


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------


def make_batch_rule(spec: str) -> Callable[[float], int]:
    """Parse a batch rule: 'fixed:<B>' or 'cbs:<b0>,<alpha>,<d_ref>'.

    The cbs rule sets batch to the power of two nearest b0*(D/d_ref)**alpha,
    mimicking a critical-batch-size power law in the token budget D.
    """
    kind, _, arg = spec.partition(":")
    if kind == "fixed":
        b = int(arg)
        if b < 1:
            raise ValueError("fixed batch must be at least 1")
        return lambda d: b
    if kind == "cbs":
        try:
            b0, alpha, d_ref = (float(x) for x in arg.split(","))
        except ValueError:
            raise ValueError(f"bad cbs batch rule {spec!r}") from None
        return lambda d: max(1, 2 ** int(round(math.log2(max(b0 * (d / d_ref) ** alpha, 1.0)))))
    raise ValueError(f"unknown batch rule {spec!r}")


@dataclass(frozen=True)
class DatasetDesign:
    """Template for a synthetic scaling study.

    kind "isoflops": ``levels`` compute budgets quadrupling from
    ``base_compute``; per level a log-spaced model-size sweep whose window
    grows by ``level_n_growth`` per level; tokens D = C/(6N) split into
    batch and steps by ``batch_rule``. Levels below ``train_levels`` are
    tagged train, the rest holdout.

    kind "isotokens": for each model size in ``bk_n_params`` and token
    budget in ``bk_tokens``, the batch is swept over powers of two around
    the rule's choice (``bk_span`` each way) at exactly constant tokens.
    """

    kind: str = "isoflops"
    seq_len: int = 512
    batch_rule: str = "cbs:64,0.35,1e8"
    base_compute: float = 1e13
    levels: int = 9
    models_per_level: int = 8
    n_lo: float = 3e4
    n_hi: float = 1e6
    level_n_growth: float = 2.0
    train_levels: int = 6
    bk_n_params: Tuple[int, ...] = (1_000_000, 10_000_000)
    bk_tokens: Tuple[float, ...] = (2e8, 8e8)
    bk_span: int = 3

    def __post_init__(self):
        if self.kind not in ("isoflops", "isotokens"):
            raise ValueError(f"unknown design kind {self.kind!r}")

    def level_compute(self, level: int) -> float:
        return self.base_compute * 4.0**level


def _isoflops_runs(design: DatasetDesign):
    rule = make_batch_rule(design.batch_rule)
    runs, skipped = [], []
    for level in range(design.levels):
        target = design.level_compute(level)
        grow = design.level_n_growth**level
        sizes = np.geomspace(design.n_lo * grow, design.n_hi * grow, design.models_per_level)
        for n in np.unique(np.round(sizes).astype(int)):
            d_target = target / (6.0 * n)
            batch = rule(d_target)
            steps = int(round(d_target / (batch * design.seq_len)))
            if steps < 1:
                skipped.append(
                    {"n_params": int(n), "level": level, "reason": "steps below 1"}
                )
                continue
            split = "train" if level < design.train_levels else "holdout"
            tags = frozenset({"isoflops", f"level:{level}", split})
            runs.append((RunConfig(int(n), batch, steps, design.seq_len), tags))
    return runs, skipped


def _isotokens_runs(design: DatasetDesign):
    rule = make_batch_rule(design.batch_rule)
    runs, skipped = [], []
    for n in design.bk_n_params:
        for level, d_target in enumerate(design.bk_tokens):
            b_max = rule(d_target) << design.bk_span
            k0 = int(round(d_target / (b_max * design.seq_len)))
            if k0 < 1:
                skipped.append(
                    {"n_params": int(n), "level": level, "reason": "steps below 1 at largest batch"}
                )
                continue
            for i in range(2 * design.bk_span + 1):
                batch = b_max >> i
                if batch < 1:
                    skipped.append(
                        {"n_params": int(n), "level": level, "reason": "batch below 1"}
                    )
                    break
                tags = frozenset({"bk-plane", f"level:{level}", f"n:{int(n)}", "train"})
                runs.append((RunConfig(int(n), batch, k0 << i, design.seq_len), tags))
    return runs, skipped


def generate_synthetic_dataset(
    theta: NqsParams,
    design: DatasetDesign,
    noise_sd: float = 0.0,
    seed: int = 0,
) -> ScalingDataset:
    """Evaluate the closed-form loss over a design and add log-normal noise.

    Infeasible grid entries (steps or batch rounding below 1) are skipped
    and reported under ``dataset.meta["skipped"]``.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    runs, skipped = (
        _isoflops_runs(design) if design.kind == "isoflops" else _isotokens_runs(design)
    )
    eps = np.random.default_rng(seed).normal(0.0, noise_sd or 0.0, size=len(runs))
    records = tuple(
        ScalingRecord(
            n_params=run.n_params,
            batch=run.batch,
            steps=run.steps,
            seq_len=run.seq_len,
            loss=nqs_loss(theta, run) * math.exp(eps[i]),
            tags=tags,
        )
        for i, (run, tags) in enumerate(runs)
    )
    return ScalingDataset(records, {"skipped": skipped})
