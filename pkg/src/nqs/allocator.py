"""Constrained search for the best training configuration.

Given a fitted loss model, find the (n_params, batch, steps) grid point
with the lowest predicted loss subject to a compute budget and optional
time, memory, and data ceilings. The search is an exact scan: every
feasible grid point is evaluated and the argmin is returned, with ties
going to the smaller model, then batch, then steps. A slice helper emits
the fixed-compute loss curves used for isoflop plots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .chinchilla import ChinParams, chin_loss
from .core import nqs_loss, nqs_loss_layernorm
from .params import LayerNormConfig, NqsParams, RunConfig, UnstableDynamicsError

__all__ = [
    "ConstraintSet",
    "GridSpec",
    "InfeasibleSearchError",
    "SearchResult",
    "SliceRow",
    "axis_candidates",
    "chin_model",
    "constrained_search",
    "isoflop_slice",
    "nqs_model",
]

LossModel = Callable[[RunConfig], float]


class InfeasibleSearchError(Exception):
    """No grid point satisfies the constraints."""

    def __init__(self, binding: str, violated: int, total: int):
        self.binding = binding
        super().__init__(
            f"no feasible grid point: tightest constraint is {binding} "
            f"(violated by {violated} of {total} candidates)"
        )


@dataclass(frozen=True)
class ConstraintSet:
    """Resource ceilings for a training run.

    compute counts 6*N*B*K*seq_len flops. The time ceiling has two
    readings: serial weight updates scaled by model size (T = N*K, the
    default) or plain step count (K); pick with time_rule.
    """

    compute_max: float
    time_max: Optional[float] = None
    memory_max: Optional[float] = None
    data_max: Optional[float] = None
    seq_len: int = 1
    time_rule: str = "nk"  # or "steps"

    def __post_init__(self):
        if not self.compute_max > 0:
            raise ValueError("compute_max must be positive")
        for name in ("time_max", "memory_max", "data_max"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive when set")
        if self.seq_len < 1:
            raise ValueError("seq_len must be at least 1")
        if self.time_rule not in ("nk", "steps"):
            raise ValueError("time_rule must be 'nk' or 'steps'")


@dataclass(frozen=True)
class GridSpec:
    """Log-spaced integer candidates per axis, bounds inclusive."""

    n_bounds: Tuple[float, float]
    b_bounds: Tuple[float, float]
    k_bounds: Tuple[float, float]
    points_per_decade: int = 16

    def __post_init__(self):
        for name in ("n_bounds", "b_bounds", "k_bounds"):
            lo, hi = getattr(self, name)
            if not (lo >= 1 and hi >= lo):
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.points_per_decade < 1:
            raise ValueError("points_per_decade must be at least 1")

    def n_candidates(self) -> np.ndarray:
        return axis_candidates(*self.n_bounds, self.points_per_decade)

    def b_candidates(self) -> np.ndarray:
        return axis_candidates(*self.b_bounds, self.points_per_decade)

    def k_candidates(self) -> np.ndarray:
        return axis_candidates(*self.k_bounds, self.points_per_decade)


def axis_candidates(lo: float, hi: float, points_per_decade: int = 16) -> np.ndarray:
    """Distinct positive integers, log-spaced at the given density."""
    decades = math.log10(hi / lo) if hi > lo else 0.0
    count = max(1, int(round(decades * points_per_decade)) + 1)
    vals = np.geomspace(lo, hi, count)
    ints = np.unique(np.maximum(1, np.round(vals)).astype(np.int64))
    return ints


class SearchResult(NamedTuple):
    config: RunConfig
    loss: float
    n_feasible: int


@dataclass(frozen=True)
class SliceRow:
    n_params: int
    batch: int
    steps: int
    loss: float


def nqs_model(theta: NqsParams, ln: Optional[LayerNormConfig] = None) -> LossModel:
    """Loss handle for the mode-sum model; diverging configs score +inf."""

    def model(run: RunConfig) -> float:
        try:
            if ln is not None:
                return nqs_loss_layernorm(theta, run, ln)
            return nqs_loss(theta, run)
        except UnstableDynamicsError:
            return math.inf

    return model


def chin_model(phi: ChinParams) -> LossModel:
    """Loss handle for the baseline; reads only model size and tokens."""

    def model(run: RunConfig) -> float:
        return chin_loss(phi, run.n_params, max(1, run.tokens))

    return model


def _violation_masks(cons: ConstraintSet, n, b, k):
    """Per-constraint violation masks over broadcast (N, B, K) arrays."""
    seq = float(cons.seq_len)
    masks = {"compute": 6.0 * n * b * k * seq > cons.compute_max}
    if cons.time_max is not None:
        t = n * k if cons.time_rule == "nk" else k
        masks["time"] = t > cons.time_max
    if cons.memory_max is not None:
        masks["memory"] = b * n > cons.memory_max
    if cons.data_max is not None:
        masks["data"] = b * k * seq > cons.data_max
    return masks


def constrained_search(
    model: LossModel, cons: ConstraintSet, grid: GridSpec
) -> SearchResult:
    """Exact argmin of the model over the feasible grid.

    Every feasible point is evaluated; the scan order (N, then B, then K,
    each ascending) makes the first minimum the tie-break winner. Raises
    InfeasibleSearchError naming the most-violated constraint when nothing
    is feasible.
    """
    ns = grid.n_candidates().astype(float)
    bs = grid.b_candidates().astype(float)
    ks = grid.k_candidates().astype(float)
    n_g = ns[:, None, None]
    b_g = bs[None, :, None]
    k_g = ks[None, None, :]
    masks = _violation_masks(cons, n_g, b_g, k_g)
    violated = np.zeros((ns.size, bs.size, ks.size), dtype=bool)
    for msk in masks.values():
        violated |= msk
    feasible = ~violated
    n_feasible = int(feasible.sum())
    if n_feasible == 0:
        counts = {name: int(np.broadcast_to(m, violated.shape).sum())
                  for name, m in masks.items()}
        binding = max(counts, key=lambda name: (counts[name], name))
        raise InfeasibleSearchError(binding, counts[binding], violated.size)

    best_loss = math.inf
    best: Optional[RunConfig] = None
    idx_n, idx_b, idx_k = np.nonzero(feasible)
    for i, j, l in zip(idx_n, idx_b, idx_k):
        run = RunConfig(
            n_params=int(ns[i]), batch=int(bs[j]), steps=int(ks[l]),
            seq_len=cons.seq_len,
        )
        loss = model(run)
        if loss < best_loss:
            best_loss = loss
            best = run
    if best is None:
        # every feasible point scored +inf; report the first one honestly
        i, j, l = idx_n[0], idx_b[0], idx_k[0]
        best = RunConfig(
            n_params=int(ns[i]), batch=int(bs[j]), steps=int(ks[l]),
            seq_len=cons.seq_len,
        )
    return SearchResult(config=best, loss=float(best_loss), n_feasible=n_feasible)


def isoflop_slice(
    model: LossModel,
    compute: float,
    cons: ConstraintSet,
    n_candidates: Sequence[int],
    b_candidates: Optional[Sequence[int]] = None,
    batch_rule: Optional[Union[str, Callable[[float], int]]] = None,
) -> Tuple[List[SliceRow], List[Tuple[int, str]]]:
    """Loss along a fixed-compute curve, one row per model size.

    For each N the step count comes from K = compute/(6*N*B*seq_len),
    rounded down. B comes from the batch rule when one is given, otherwise
    from an inner argmin over b_candidates. Returns (rows, skipped) where
    skipped lists (N, reason) for sizes with no feasible configuration.
    """
    if not compute > 0:
        raise ValueError("compute must be positive")
    if batch_rule is None and b_candidates is None:
        raise ValueError("need either a batch rule or batch candidates")
    rule: Optional[Callable[[float], int]] = None
    if batch_rule is not None:
        if isinstance(batch_rule, str):
            from .simulator import make_batch_rule

            rule = make_batch_rule(batch_rule)
        else:
            rule = batch_rule

    seq = cons.seq_len
    rows: List[SliceRow] = []
    skipped: List[Tuple[int, str]] = []
    for n in n_candidates:
        n = int(n)
        tokens_target = compute / (6.0 * n)
        if rule is not None:
            bsel = [int(rule(tokens_target))]
        else:
            bsel = [int(b) for b in b_candidates]
        best: Optional[SliceRow] = None
        reason = "no steps fit the budget"
        for b in bsel:
            k = int(compute // (6.0 * n * b * seq))
            if k < 1:
                continue
            run = RunConfig(n_params=n, batch=b, steps=k, seq_len=seq)
            masks = _violation_masks(cons, float(n), float(b), float(k))
            hit = [name for name, bad in masks.items() if bool(bad)]
            if hit:
                reason = f"violates {', '.join(hit)}"
                continue
            loss = model(run)
            if best is None or loss < best.loss:
                best = SliceRow(n_params=n, batch=b, steps=k, loss=float(loss))
        if best is None:
            skipped.append((n, reason))
        else:
            rows.append(best)
    return rows, skipped
