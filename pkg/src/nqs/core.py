"""Closed-form loss and weight-norm evaluators for the mode-sum model.

The loss of a run (N parameters, batch B, K steps) decomposes into

    loss = e_irr + appx_error(N) + bias_error(N, K) + var_error(N, B, K)

where the approximation term is the mass of modes the model cannot
represent (a zeta tail), the bias term is the decaying initial
displacement of the modes it can, and the variance term is accumulated
gradient noise. All mode sums share one hybrid exact/quadrature scheme.

Evaluators accept dual numbers through the same code path, which is how
``nqs_gradient`` returns the analytic 7-component gradient.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numerics as nm
from .numerics import Dual
from .params import LayerNormConfig, LrSchedule, NqsParams, RunConfig, UnstableDynamicsError

__all__ = [
    "appx_error",
    "bias_bound_ratio",
    "bias_error",
    "expected_weight_norm_sq",
    "nqs_gradient",
    "nqs_loss",
    "nqs_loss_layernorm",
    "nqs_loss_scheduled",
    "var_error",
]

DEFAULT_MODE_GRID = 512


@lru_cache(maxsize=4096)
def _loss_nodes(n_total: int):
    nodes, log_nodes, weights = nm.power_sum_nodes(n_total)
    for arr in (nodes, log_nodes, weights):
        arr.setflags(write=False)
    return nodes, log_nodes, weights


@lru_cache(maxsize=512)
def _mode_grid(n_total: int, grid_size: int):
    """Mode-state grid: exact head plus log-spaced trapezoid tail with
    Euler-Maclaurin endpoint corrections folded into the end weights."""
    if n_total <= nm.DEFAULT_HEAD_LIMIT:
        nodes = np.arange(1, n_total + 1, dtype=float)
        log_nodes, weights = np.log(nodes), np.ones(n_total)
    else:
        head = np.arange(1, nm.DEFAULT_HEAD_LIMIT + 1, dtype=float)
        lo, hi = np.log(nm.DEFAULT_HEAD_LIMIT), np.log(n_total)
        log_grid = np.linspace(lo, hi, grid_size)
        grid = np.exp(log_grid)
        du = (hi - lo) / (grid_size - 1)
        wu = np.full(grid_size, du)
        wu[0] = wu[-1] = 0.5 * du
        grid_w = wu * grid
        grid_w[0] -= 0.5
        grid_w[-1] += 0.5
        nodes = np.concatenate([head, grid])
        log_nodes = np.concatenate([np.log(head), log_grid])
        weights = np.concatenate([np.ones(head.size), grid_w])
    for arr in (nodes, log_nodes, weights):
        arr.setflags(write=False)
    return nodes, log_nodes, weights


def _check_args(n_params: int, steps: int, batch: int = 1) -> None:
    if n_params < 1:
        raise ValueError("n_params must be at least 1")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if batch < 1:
        raise ValueError("batch must be at least 1")


def _check_stable(q_scale, steps: int, gamma: float = 1.0) -> None:
    if steps > 0 and gamma * nm.value(q_scale) >= 2.0:
        raise UnstableDynamicsError(gamma, float(nm.value(q_scale)))


# ---------------------------------------------------------------------------
# Dual-generic term evaluators (shared by loss and gradient)
# ---------------------------------------------------------------------------


def _decay_sq(q, q_scale, log_nodes, steps: int):
    """(1 - Q/n^q)^(2K) on the nodes, stable through the sign flip at Q/n^q = 1."""
    t = q_scale * nm.exp(q * (-log_nodes))
    rho = 1.0 - t
    dead = np.asarray(nm.value(rho)) == 0.0
    rho_safe = nm.where(dead, 0.5, rho)
    with np.errstate(divide="ignore"):
        decay = nm.exp((2.0 * steps) * nm.log(abs(rho_safe)))
    return nm.where(dead, 0.0, decay)


def _appx_term(p, p_scale, n_params: int):
    return p_scale * nm.zeta_tail(p, n_params)


def _bias_term(p, p_scale, q, q_scale, n_params: int, steps: int):
    if steps == 0:
        return p_scale * (nm.zeta_tail(p, 0) - nm.zeta_tail(p, n_params))
    nodes, log_nodes, weights = _loss_nodes(n_params)
    vals = p_scale * nm.exp(p * (-log_nodes)) * _decay_sq(q, q_scale, log_nodes, steps)
    return nm.weighted_total(weights, vals)


def _var_term(q, q_scale, r, r_scale, n_params: int, batch: int, steps: int):
    if steps == 0:
        return 0.0
    nodes, log_nodes, weights = _loss_nodes(n_params)
    rho = 1.0 - q_scale * nm.exp(q * (-log_nodes))
    geom = nm.geometric_sum_sq(rho, steps)
    vals = (q_scale * r_scale / batch) * nm.exp((q + r) * (-log_nodes)) * geom
    return nm.weighted_total(weights, vals)


def _loss_terms(p, P, q, Q, r, R, e_irr, n_params: int, batch: int, steps: int):
    appx = _appx_term(p, P, n_params)
    bias = _bias_term(p, P, q, Q, n_params, steps)
    var = _var_term(q, Q, r, R, n_params, batch, steps)
    return ((e_irr + appx) + bias) + var


# ---------------------------------------------------------------------------
# Public closed-form evaluators
# ---------------------------------------------------------------------------


def appx_error(theta: NqsParams, n_params: int) -> float:
    """Loss floor from modes beyond the model's capacity: P * zeta_tail(p, N)."""
    _check_args(n_params, 0)
    return float(_appx_term(theta.p, theta.P, n_params))


def bias_error(theta: NqsParams, n_params: int, steps: int) -> float:
    """Remaining initial-displacement error of the first N modes after K steps."""
    _check_args(n_params, steps)
    _check_stable(theta.Q, steps)
    return float(nm.value(_bias_term(theta.p, theta.P, theta.q, theta.Q, n_params, steps)))


def var_error(theta: NqsParams, n_params: int, batch: int, steps: int) -> float:
    """Accumulated gradient-noise error; scales exactly as 1/batch."""
    _check_args(n_params, steps, batch)
    _check_stable(theta.Q, steps)
    return float(nm.value(_var_term(theta.q, theta.Q, theta.r, theta.R, n_params, batch, steps)))


def nqs_loss(theta: NqsParams, run: RunConfig) -> float:
    """Expected loss of a constant-learning-rate run."""
    _check_stable(theta.Q, run.steps)
    t = theta
    return float(
        _loss_terms(t.p, t.P, t.q, t.Q, t.r, t.R, t.e_irr, run.n_params, run.batch, run.steps)
    )


def nqs_gradient(theta: NqsParams, run: RunConfig) -> np.ndarray:
    """Gradient of nqs_loss in the parameters, ordered (p, P, q, Q, r, R, e_irr)."""
    _check_stable(theta.Q, run.steps)
    seeds = [Dual.variable(v, i, 7) for i, v in enumerate(theta.as_array())]
    loss = _loss_terms(*seeds, run.n_params, run.batch, run.steps)
    return np.asarray(loss.par, dtype=float).copy()


def bias_bound_ratio(theta: NqsParams, n_params: int, steps_list: Sequence[int]) -> np.ndarray:
    """bias_error * K^((p-1)/q) over a step grid.

    In the contraction regime this ratio approaches a constant as K grows,
    as long as N stays well above the step-dependent knee mode.
    """
    expo = (theta.p - 1.0) / theta.q
    return np.array(
        [bias_error(theta, n_params, int(k)) * float(k) ** expo for k in steps_list]
    )


# ---------------------------------------------------------------------------
# Stepwise state machine (schedules, weight norms, normalization feedback)
# ---------------------------------------------------------------------------


def _advance(F, V, t, sig2_unit, gamma: float, span: int):
    """Push per-mode state through ``span`` steps at a constant gamma.

    F is the surviving fraction of the initial displacement (signed),
    V the accumulated noise second moment at unit batch.
    """
    rho = 1.0 - gamma * t
    with np.errstate(divide="ignore"):
        log_rho = np.log(np.abs(rho))
    decay = np.exp(span * log_rho)
    sign = np.where((rho < 0.0) & (span % 2 == 1), -1.0, 1.0)
    geom = nm.geometric_sum_sq(rho, span)
    V = np.exp((2.0 * span) * log_rho) * V + (gamma * gamma) * sig2_unit * geom
    F = sign * decay * F
    return F, V


def _segment_spans(steps: int, n_segments: int) -> np.ndarray:
    """Split K steps into at most n_segments log-spaced spans, each >= 1 step."""
    if n_segments >= steps:
        return np.ones(steps, dtype=int)
    edges = np.geomspace(1.0, steps, n_segments + 1)[1:]
    bounds = np.unique(np.round(edges).astype(int))
    return np.diff(np.concatenate([[0], bounds]))


class _ModeState:
    """Per-mode first/second moment state on a node grid, with readouts."""

    def __init__(self, theta: NqsParams, n_params: int, grid_size: int):
        self.theta = theta
        self.n_params = n_params
        nodes, log_nodes, weights = _mode_grid(n_params, grid_size)
        self.weights = weights
        self.t = theta.Q * np.exp(-theta.q * log_nodes)
        self.sig2_unit = 2.0 * theta.R * np.exp(-theta.r * log_nodes)
        self.bias_coef = theta.P * np.exp(-theta.p * log_nodes)
        self.curv_half = 0.5 * theta.Q * np.exp(-theta.q * log_nodes)
        self.disp = 2.0 * (theta.P / theta.Q) * np.exp((theta.q - theta.p) * log_nodes)
        self.tail = theta.P * nm.zeta_tail(theta.p, n_params)
        self.F = np.ones(nodes.size)
        self.V = np.zeros(nodes.size)

    def advance(self, gamma: float, span: int) -> None:
        self.F, self.V = _advance(self.F, self.V, self.t, self.sig2_unit, gamma, span)

    def loss(self, batch: int) -> float:
        per_mode = self.bias_coef * self.F**2 + self.curv_half * (self.V / batch)
        return float(self.theta.e_irr + self.tail + self.weights @ per_mode)

    def norm_sq(self, s: float, batch: int) -> float:
        per_mode = (1.0 - self.F) ** 2 * self.disp + self.V / batch
        return float(s + self.weights @ per_mode)


def nqs_loss_scheduled(theta: NqsParams, run: RunConfig, schedule: LrSchedule) -> float:
    """Expected loss under a piecewise-constant learning-rate scale."""
    if schedule.total_steps != run.steps:
        raise ValueError(
            f"schedule covers {schedule.total_steps} steps but the run has {run.steps}"
        )
    _check_stable(theta.Q, run.steps, schedule.gamma_max)
    state = _ModeState(theta, run.n_params, DEFAULT_MODE_GRID)
    for span, gamma in schedule:
        state.advance(gamma, span)
    return state.loss(run.batch)


def expected_weight_norm_sq(theta: NqsParams, run: RunConfig, ln: LayerNormConfig) -> float:
    """Closed-form E||w||^2 after the run at a constant gamma_init step scale.

    The untrained constant mass contributes ``ln.s``; each trained mode
    contributes its moved displacement plus accumulated noise.
    """
    _check_stable(theta.Q, run.steps, ln.gamma_init)
    nodes, log_nodes, weights = _loss_nodes(run.n_params)
    t = theta.Q * np.exp(-theta.q * log_nodes)
    F = np.ones(nodes.size)
    V = np.zeros(nodes.size)
    if run.steps > 0:
        sig2_unit = 2.0 * theta.R * np.exp(-theta.r * log_nodes)
        F, V = _advance(F, V, t, sig2_unit, ln.gamma_init, run.steps)
    disp = 2.0 * (theta.P / theta.Q) * np.exp((theta.q - theta.p) * log_nodes)
    per_mode = (1.0 - F) ** 2 * disp + V / run.batch
    return float(ln.s + weights @ per_mode)


def nqs_loss_layernorm(theta: NqsParams, run: RunConfig, ln: LayerNormConfig) -> float:
    """Expected loss when the step scale is damped by the growing weight norm.

    At the start of each span the effective scale is
    gamma_init * s / E||w||^2, evaluated from the current closed-form
    state, then held constant across the span.
    """
    if run.steps == 0:
        return nqs_loss(theta, run)
    state = _ModeState(theta, run.n_params, ln.mode_grid_size)
    for span in _segment_spans(run.steps, ln.n_segments):
        gamma = ln.gamma_init * ln.s / state.norm_sq(ln.s, run.batch)
        _check_stable(theta.Q, run.steps, gamma)
        state.advance(gamma, int(span))
    return state.loss(run.batch)
