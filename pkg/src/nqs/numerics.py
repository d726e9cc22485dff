"""Dual-number arithmetic and power-law summation utilities.

Three building blocks live here:

* ``Dual``: forward-mode dual numbers carrying a vector of partial
  derivatives, so one evaluation of the loss produces its gradient too.
  Values may be scalars or numpy arrays; partials ride along on a
  trailing axis.
* hybrid power sums: sums of a smooth summand f(n) over n = 1..N, exact
  for small N, and exact head + Gauss-Legendre quadrature in log space
  with Euler-Maclaurin endpoint corrections for large N.
* ``zeta_tail``: the Riemann zeta tail sum_{n > N} n**-p, accurate to
  near machine precision for any p > 1, including dual-valued p.

Every helper accepts plain floats/arrays or ``Dual`` values, which is how
the analytic gradient shares a single code path with the loss itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable

import numpy as np

__all__ = [
    "Dual",
    "NumericsError",
    "SummandSpec",
    "default_head_cutoff",
    "exp",
    "expm1",
    "gauss_legendre_integrate",
    "geometric_sum_sq",
    "hybrid_power_sum",
    "log",
    "log1p",
    "power_sum_nodes",
    "sqrt",
    "value",
    "where",
    "weighted_total",
    "zeta_tail",
]

DEFAULT_HEAD_LIMIT = 100
DEFAULT_QUAD_POINTS = 20

# First summation index covered by the asymptotic zeta tail expansion.
# Large enough that the truncated Euler-Maclaurin series is accurate to
# ~1e-15 relative for every p > 1.
_ZETA_EXACT_FLOOR = 64


class NumericsError(ValueError):
    """A numeric evaluation produced something unusable (non-finite, bad domain)."""


class Dual:
    """Forward-mode dual number with a fixed-length vector of partials.

    ``val`` is a float or ndarray; ``par`` has shape ``shape(val) + (n,)``
    where n is the number of independent variables being tracked.
    Arithmetic broadcasts like numpy on the value part.
    """

    __slots__ = ("val", "par")

    def __init__(self, val, par):
        self.val = val
        self.par = np.asarray(par, dtype=float)

    @classmethod
    def variable(cls, val, index: int, n_partials: int) -> "Dual":
        """Seed an independent variable: partial 1 at ``index``, 0 elsewhere."""
        par = np.zeros(np.shape(val) + (n_partials,))
        par[..., index] = 1.0
        return cls(val, par)

    @classmethod
    def constant(cls, val, n_partials: int) -> "Dual":
        return cls(val, np.zeros(np.shape(val) + (n_partials,)))

    @property
    def n_partials(self) -> int:
        return self.par.shape[-1]

    def __repr__(self) -> str:
        return f"Dual(val={self.val!r}, par={self.par!r})"

    # -- arithmetic ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.par + other.par)
        return Dual(self.val + other, _match(self.par, np.shape(self.val + other)))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.par)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Dual) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                _tail(self.val) * other.par + _tail(other.val) * self.par,
            )
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, _tail(other) * self.par)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            return Dual(val, (self.par - _tail(val) * other.par) * _tail(inv))
        other = np.asarray(other, dtype=float)
        return Dual(self.val / other, self.par / _tail(other))

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        val = other * inv
        return Dual(val, -_tail(val * inv) * self.par)

    def __pow__(self, expo):
        if isinstance(expo, Dual):
            raise TypeError("dual exponents are not supported; use exp/log")
        val = self.val**expo
        return Dual(val, _tail(expo * self.val ** (expo - 1)) * self.par)

    def __abs__(self):
        return Dual(np.abs(self.val), _tail(np.sign(self.val)) * self.par)

    # -- comparisons look at the value part only ----------------------

    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    def sum(self) -> "Dual":
        """Sum over every value axis, keeping the partials axis."""
        n = self.n_partials
        return Dual(np.sum(self.val), self.par.reshape(-1, n).sum(axis=0))


def _tail(x) -> np.ndarray:
    """Append a broadcasting axis for the partials dimension."""
    return np.asarray(x, dtype=float)[..., None]


def _match(par: np.ndarray, val_shape) -> np.ndarray:
    """Broadcast a partials array to agree with a new value shape."""
    target = tuple(val_shape) + (par.shape[-1],)
    return np.broadcast_to(par, np.broadcast_shapes(par.shape, target)).copy()


def value(x):
    """The plain value part of x, whether or not it is a Dual."""
    return x.val if isinstance(x, Dual) else x


def _unary(fn: Callable, dfn: Callable):
    def wrapped(x):
        if isinstance(x, Dual):
            v = fn(x.val)
            return Dual(v, _tail(dfn(x.val, v)) * x.par)
        return fn(x)

    return wrapped


exp = _unary(np.exp, lambda x, v: v)
log = _unary(np.log, lambda x, v: 1.0 / x)
log1p = _unary(np.log1p, lambda x, v: 1.0 / (1.0 + x))
expm1 = _unary(np.expm1, lambda x, v: v + 1.0)
sqrt = _unary(np.sqrt, lambda x, v: 0.5 / v)


def where(cond, a, b):
    """Branch on a boolean (array) condition; works for Dual and plain values."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.where(cond, a, b)
    n = a.n_partials if isinstance(a, Dual) else b.n_partials
    pa = a.par if isinstance(a, Dual) else np.zeros(np.shape(a) + (n,))
    pb = b.par if isinstance(b, Dual) else np.zeros(np.shape(b) + (n,))
    cond = np.asarray(cond)
    return Dual(np.where(cond, value(a), value(b)), np.where(cond[..., None], pa, pb))


def weighted_total(weights: np.ndarray, vals):
    """Dot product of a weight vector with (possibly dual) summand values."""
    if isinstance(vals, Dual):
        v = np.broadcast_to(vals.val, weights.shape)
        par = np.broadcast_to(vals.par, weights.shape + (vals.n_partials,))
        return Dual(float(weights @ v), weights @ par)
    return float(weights @ np.broadcast_to(vals, weights.shape))


# ---------------------------------------------------------------------------
# Gauss-Legendre quadrature
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _leggauss(points: int):
    nodes, weights = np.polynomial.legendre.leggauss(points)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_legendre_integrate(f: Callable, a: float, b: float, points: int = DEFAULT_QUAD_POINTS):
    """Integrate f over [a, b] with fixed-order Gauss-Legendre quadrature.

    Exact for polynomials of degree <= 2*points - 1. The integrand is
    called once with the full node array; a non-vectorized integrand that
    rejects arrays is evaluated node by node instead.
    """
    if points < 1:
        raise ValueError("quadrature needs at least one point")
    xi, w0 = _leggauss(points)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    x = mid + half * xi
    try:
        vals = f(x)
    except (TypeError, ValueError):
        vals = np.array([f(float(xj)) for xj in x])
    if not isinstance(vals, Dual) and np.shape(vals) != x.shape:
        vals = np.array([f(float(xj)) for xj in x])
    return weighted_total(half * w0, vals)


# ---------------------------------------------------------------------------
# Zeta tails
# ---------------------------------------------------------------------------


def zeta_tail(p, n_start: int):
    """The tail sum_{n > n_start} n**-p for p > 1 (dual-capable in p).

    Terms up to a fixed floor are summed exactly; the remainder uses the
    Euler-Maclaurin asymptotic expansion of the tail at its first index,
    truncated after the B_6 term, which is accurate to ~1e-15 relative.
    """
    if value(p) <= 1.0:
        raise NumericsError(f"zeta tail requires p > 1, got p={value(p)!r}")
    n_start = int(n_start)
    if n_start < 0:
        raise NumericsError("zeta tail requires n_start >= 0")

    first_asym = max(n_start + 1, _ZETA_EXACT_FLOOR)
    head = 0.0
    if n_start + 1 < first_asym:
        ns = np.arange(n_start + 1, first_asym, dtype=float)
        terms = exp(p * (-np.log(ns)))
        head = terms.sum() if isinstance(terms, Dual) else float(terms.sum())

    m = float(first_asym)
    e = exp(p * (-math.log(m)))  # m**-p
    tail = e * m / (p - 1.0) + e * 0.5
    tail = tail + p * e / (12.0 * m)
    tail = tail - p * (p + 1.0) * (p + 2.0) * e / (720.0 * m**3)
    tail = tail + p * (p + 1.0) * (p + 2.0) * (p + 3.0) * (p + 4.0) * e / (30240.0 * m**5)
    return head + tail


# ---------------------------------------------------------------------------
# Stable geometric sums
# ---------------------------------------------------------------------------


def geometric_sum_sq(rho, k, branch_tol: float = 1e-12):
    """Sum of rho**(2j) for j = 0..k-1, stable for rho**2 near 1.

    Uses expm1/log so that huge k and rho close to +-1 lose no precision:
    the closed form (rho**(2k) - 1)/(rho**2 - 1) becomes
    expm1(k*u)/expm1(u) with u = 2*log|rho|. Within ``branch_tol`` of
    rho**2 = 1 the exact limit k is returned.
    """
    scalar = not isinstance(rho, Dual) and np.ndim(rho) == 0 and np.ndim(k) == 0
    v = np.asarray(value(rho), dtype=float)
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise NumericsError("geometric sum needs k >= 0")

    at_limit = np.abs(v * v - 1.0) < branch_tol
    at_zero = v == 0.0
    safe_rho = where(at_zero, 0.5, rho)
    k_eff = np.maximum(k, 1.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        u = 2.0 * log(abs(safe_rho) if isinstance(safe_rho, Dual) else np.abs(safe_rho))
        denom = where(at_limit, 1.0, expm1(u))
        ratio = expm1(k_eff * u) / denom

    out = where(at_limit, k, ratio)
    out = where(at_zero, np.minimum(k, 1.0), out)
    out = where(k == 0.0, 0.0, out)
    return float(value(out)) if scalar else out


# ---------------------------------------------------------------------------
# Hybrid exact + Euler-Maclaurin power sums
# ---------------------------------------------------------------------------


def default_head_cutoff(n_total: int) -> int:
    """Exact-head length for the hybrid sum: 5% of the range, at most 100 terms."""
    return min(n_total // 20, DEFAULT_HEAD_LIMIT)


@dataclass(frozen=True)
class SummandSpec:
    """A summand f(n, params) to be summed over n = 1..N.

    ``evaluator`` must accept a float ndarray of n values (it is called on
    whole node batches) and may return floats or Dual values.
    """

    evaluator: Callable[[np.ndarray, Any], Any]
    head_cutoff: Callable[[int], int] = field(default=default_head_cutoff)
    quadrature_points: int = DEFAULT_QUAD_POINTS


def power_sum_nodes(
    n_total: int,
    head_cutoff: Callable[[int], int] = default_head_cutoff,
    points: int = DEFAULT_QUAD_POINTS,
):
    """Evaluation nodes and weights for sum_{n=1}^{N} f(n).

    Returns ``(nodes, log_nodes, weights)`` such that the sum is
    approximated by ``weights @ f(nodes)``. For N at or below the exact
    head limit every integer is a node with weight 1. Beyond that, the
    first L = head_cutoff(N) integers are summed exactly and the rest is
    Gauss-Legendre quadrature of f in log space over [L, N] plus the
    Euler-Maclaurin endpoint correction (f(N) - f(L))/2.
    """
    n_total = int(n_total)
    if n_total < 1:
        raise NumericsError("power sum needs N >= 1")
    head_len = head_cutoff(n_total)
    if n_total <= DEFAULT_HEAD_LIMIT or head_len >= n_total:
        nodes = np.arange(1, n_total + 1, dtype=float)
        return nodes, np.log(nodes), np.ones(n_total)

    head_len = max(int(head_len), 1)
    head = np.arange(1, head_len + 1, dtype=float)
    lo, hi = math.log(head_len), math.log(n_total)
    xi, w0 = _leggauss(points)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    log_quad = mid + half * xi
    quad = np.exp(log_quad)
    quad_w = half * w0 * quad

    nodes = np.concatenate([head, quad, [float(head_len), float(n_total)]])
    log_nodes = np.concatenate([np.log(head), log_quad, [lo, hi]])
    weights = np.concatenate([np.ones(head_len), quad_w, [-0.5, 0.5]])
    return nodes, log_nodes, weights


def hybrid_power_sum(spec: SummandSpec, n_total: int, params=None):
    """Sum spec.evaluator(n, params) over n = 1..N via the hybrid scheme."""
    nodes, _, weights = power_sum_nodes(n_total, spec.head_cutoff, spec.quadrature_points)
    vals = spec.evaluator(nodes, params)
    flat = np.asarray(value(vals), dtype=float)
    if not np.all(np.isfinite(flat)):
        bad = nodes[np.argmin(np.isfinite(np.broadcast_to(flat, nodes.shape)))]
        raise NumericsError(f"summand is not finite at node n={bad:.6g}")
    return weighted_total(weights, vals)
