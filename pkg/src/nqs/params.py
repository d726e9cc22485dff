"""Parameter containers for the noisy quadratic loss model.

The model describes pre-training loss as a sum over power-law modes. A
model of size N owns modes n = 1..N; mode n has curvature Q/n^q, initial
displacement scale set by P/n^p, and per-step gradient noise R/n^r scaled
by 1/batch. ``e_irr`` is the irreducible loss floor. The learning-rate
scale is folded into Q and R, so a plain run uses gamma = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence, Tuple

import numpy as np

__all__ = [
    "LayerNormConfig",
    "LrSchedule",
    "NqsParams",
    "RunConfig",
    "UnstableDynamicsError",
]


class UnstableDynamicsError(ValueError):
    """A mode's per-step factor |1 - gamma*Q/n^q| reached 1, so its error diverges.

    ``mode`` is the smallest offending mode index (always 1: the factor is
    monotone in n) and ``gamma`` the learning-rate scale that triggered it.
    """

    def __init__(self, gamma: float, q_scale: float, mode: int = 1):
        self.mode = mode
        self.gamma = gamma
        super().__init__(
            f"dynamics diverge at mode n={mode}: |1 - gamma*Q/n^q| >= 1 "
            f"(gamma={gamma:.6g}, Q={q_scale:.6g})"
        )


@dataclass(frozen=True)
class NqsParams:
    """The seven free parameters of the loss model.

    Exponents p, q, r and scales P, Q, R are positive with p > 1 so the
    mode sums converge; e_irr may be any real.
    """

    p: float
    P: float
    q: float
    Q: float
    r: float
    R: float
    e_irr: float

    FIELDS = ("p", "P", "q", "Q", "r", "R", "e_irr")

    def __post_init__(self):
        if not self.p > 1.0:
            raise ValueError(f"p must exceed 1 for the mode sum to converge, got {self.p}")
        for name in ("P", "q", "Q", "r", "R"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def as_array(self) -> np.ndarray:
        """Pack into the canonical order (p, P, q, Q, r, R, e_irr)."""
        return np.array([self.p, self.P, self.q, self.Q, self.r, self.R, self.e_irr])

    @classmethod
    def from_array(cls, arr) -> "NqsParams":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (7,):
            raise ValueError(f"expected 7 parameters, got shape {arr.shape}")
        return cls(*arr.tolist())

    def unstable_gamma(self, gamma: float) -> bool:
        """True when a step with this gamma diverges on some mode (worst is n=1)."""
        return gamma * self.Q >= 2.0


@dataclass(frozen=True)
class RunConfig:
    """A single training run: model size, batch size, step count, sequence length."""

    n_params: int
    batch: int
    steps: int
    seq_len: int = 1

    def __post_init__(self):
        if self.n_params < 1:
            raise ValueError("n_params must be at least 1")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.seq_len < 1:
            raise ValueError("seq_len must be at least 1")

    @property
    def tokens(self) -> int:
        return self.batch * self.steps * self.seq_len

    @property
    def compute(self) -> float:
        """Training FLOPs under the standard 6*N*D approximation."""
        return 6.0 * self.n_params * self.tokens


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning-rate scale: (step_count, gamma) segments."""

    segments: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        segs = tuple((int(t), float(g)) for t, g in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("schedule needs at least one segment")
        for t, g in segs:
            if t < 1:
                raise ValueError("each schedule segment must cover at least one step")
            if g <= 0.0:
                raise ValueError("gamma must be positive")

    @classmethod
    def constant(cls, steps: int, gamma: float = 1.0) -> "LrSchedule":
        return cls(((steps, gamma),))

    @classmethod
    def from_gammas(cls, gammas: Sequence[float]) -> "LrSchedule":
        """Compress a per-step gamma sequence into constant segments."""
        segs = []
        for g in gammas:
            if segs and segs[-1][1] == g:
                segs[-1][0] += 1
            else:
                segs.append([1, float(g)])
        return cls(tuple((t, g) for t, g in segs))

    @property
    def total_steps(self) -> int:
        return sum(t for t, _ in self.segments)

    @property
    def gamma_max(self) -> float:
        return max(g for _, g in self.segments)

    def __iter__(self) -> Iterator[Tuple[int, float]]:
        return iter(self.segments)


@dataclass(frozen=True)
class LayerNormConfig:
    """Settings for the normalization-coupled learning-rate feedback.

    ``s`` is the squared norm of the untrained (constant) parameter mass;
    the effective step scale is gamma_init * s / E||w||^2, recomputed at
    the start of each of up to ``n_segments`` log-spaced step segments.
    ``mode_grid_size`` controls the log-spaced mode grid used to track
    per-mode state when N is large.
    """

    s: float
    gamma_init: float = 1.0
    n_segments: int = 64
    mode_grid_size: int = 512

    def __post_init__(self):
        if not self.s > 0.0:
            raise ValueError("s must be positive")
        if self.gamma_init <= 0.0:
            raise ValueError("gamma_init must be positive")
        if self.n_segments < 1:
            raise ValueError("n_segments must be at least 1")
        if self.mode_grid_size < 16:
            raise ValueError("mode_grid_size must be at least 16")
