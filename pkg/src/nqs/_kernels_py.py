"""Numpy implementation of the fitting kernel.

This is the fallback lane used when the compiled extension is absent.
Both lanes consume the same ``Pack`` layout and must produce the same
objective and gradient to rounding error; the compiled lane is checked
against this one in the test suite.

The objective is the mean (over records) Huber or squared distance
between log predicted and log observed loss, evaluated in the optimizer's
z-parameterization z = (log(p-1), log P, log q, log Q, log r, log R,
e_irr). Records whose evaluation diverges or predicts a non-positive
loss contribute a flat penalty with zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import numerics as nm

BRANCH_TOL = 1e-12  # same rho**2 == 1 branch width as numerics.geometric_sum_sq
KIND_HUBER = 0
KIND_MSE = 1

_CHUNK_BUDGET = 500_000  # floats per (chunk x nodes) temporary


@dataclass
class Pack:
    """Flattened per-record summation nodes shared by both kernel lanes."""

    node_lu: np.ndarray  # log n at every bias/var node, all K>0 records
    node_w: np.ndarray  # summation weight of the node
    node_K: np.ndarray  # step count of the node's record
    node_invB: np.ndarray  # 1/batch of the node's record
    rec_ptr: np.ndarray  # (m_pos+1,) node offsets per K>0 record
    rec_K: np.ndarray  # (m_pos,) steps per K>0 record
    rec_invB: np.ndarray  # (m_pos,)
    rec_N: np.ndarray  # (m_pos,) model size per K>0 record
    pos_idx: np.ndarray  # column of each K>0 record in the full record list
    k0_idx: np.ndarray  # columns of K=0 records
    log_loss: np.ndarray  # (m,) observed log losses, original order
    n_records: int


def build_pack(runs: Sequence[Tuple[int, int, int]], losses: Sequence[float]) -> Pack:
    """Lay out summation nodes for records given as (n_params, batch, steps)."""
    losses = np.asarray(losses, dtype=float)
    if np.any(losses <= 0):
        bad = int(np.argmax(losses <= 0))
        raise ValueError(f"record {bad} has non-positive loss {losses[bad]!r}")
    lus: List[np.ndarray] = []
    ws: List[np.ndarray] = []
    ptr = [0]
    rec_K, rec_invB, rec_N, pos_idx, k0_idx = [], [], [], [], []
    for j, (n, b, k) in enumerate(runs):
        if k == 0:
            k0_idx.append(j)
            continue
        _, lu, w = nm.power_sum_nodes(int(n))
        lus.append(lu)
        ws.append(w)
        ptr.append(ptr[-1] + lu.size)
        rec_K.append(float(k))
        rec_invB.append(1.0 / float(b))
        rec_N.append(int(n))
        pos_idx.append(j)
    node_lu = np.ascontiguousarray(np.concatenate(lus) if lus else np.zeros(0))
    node_w = np.ascontiguousarray(np.concatenate(ws) if ws else np.zeros(0))
    rec_K = np.asarray(rec_K)
    rec_invB = np.asarray(rec_invB)
    ptr = np.asarray(ptr, dtype=np.int64)
    sizes = np.diff(ptr)
    return Pack(
        node_lu=node_lu,
        node_w=node_w,
        node_K=np.ascontiguousarray(np.repeat(rec_K, sizes)),
        node_invB=np.ascontiguousarray(np.repeat(rec_invB, sizes)),
        rec_ptr=ptr,
        rec_K=np.ascontiguousarray(rec_K),
        rec_invB=np.ascontiguousarray(rec_invB),
        rec_N=np.ascontiguousarray(np.asarray(rec_N, dtype=np.int64)),
        pos_idx=np.ascontiguousarray(np.asarray(pos_idx, dtype=np.int64)),
        k0_idx=np.ascontiguousarray(np.asarray(k0_idx, dtype=np.int64)),
        log_loss=np.ascontiguousarray(np.log(losses)),
        n_records=len(losses),
    )


def _zeta_tail_dp(p: np.ndarray, n_start: int) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized zeta tail and its p-derivative (mirrors numerics.zeta_tail)."""
    first = max(n_start + 1, 64)
    val = np.zeros_like(p)
    dp = np.zeros_like(p)
    if n_start + 1 < first:
        ln = np.log(np.arange(n_start + 1, first, dtype=float))
        e = np.exp(-p[:, None] * ln)
        val += e.sum(axis=1)
        dp += -(e * ln).sum(axis=1)
    m = float(first)
    lm = np.log(m)
    e = np.exp(-p * lm)
    b0 = m / (p - 1.0)
    b1 = p / (12.0 * m)
    b2 = p * (p + 1.0) * (p + 2.0) / (720.0 * m**3)
    b3 = p * (p + 1.0) * (p + 2.0) * (p + 3.0) * (p + 4.0) / (30240.0 * m**5)
    bracket = b0 + 0.5 + b1 - b2 + b3
    dbracket = (
        -m / (p - 1.0) ** 2
        + 1.0 / (12.0 * m)
        - (3.0 * p * p + 6.0 * p + 2.0) / (720.0 * m**3)
        + (5.0 * p**4 + 40.0 * p**3 + 105.0 * p * p + 100.0 * p + 24.0) / (30240.0 * m**5)
    )
    val += e * bracket
    dp += e * (dbracket - lm * bracket)
    return val, dp


def theta_from_z(z: np.ndarray) -> np.ndarray:
    """Map optimizer coordinates to model parameters, columnwise."""
    th = np.empty_like(z)
    th[..., 0] = 1.0 + np.exp(z[..., 0])
    th[..., 1:6] = np.exp(z[..., 1:6])
    th[..., 6] = z[..., 6]
    return th


def z_from_theta(theta: np.ndarray) -> np.ndarray:
    z = np.empty_like(theta)
    z[..., 0] = np.log(theta[..., 0] - 1.0)
    z[..., 1:6] = np.log(theta[..., 1:6])
    z[..., 6] = theta[..., 6]
    return z


def objective_batch(
    z: np.ndarray,
    pack: Pack,
    delta: float = 1e-3,
    penalty: float = 1e6,
    kind: int = KIND_HUBER,
) -> Tuple[np.ndarray, np.ndarray]:
    """Objective and z-gradient for a batch of parameter vectors (M, 7)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n_init = z.shape[0]
    obj = np.empty(n_init)
    grad = np.empty((n_init, 7))
    rows = max(1, _CHUNK_BUDGET // max(1, pack.node_lu.size))
    for lo in range(0, n_init, rows):
        hi = min(lo + rows, n_init)
        obj[lo:hi], grad[lo:hi] = _objective_chunk(z[lo:hi], pack, delta, penalty, kind)
    return obj, grad


def _objective_chunk(z, pack, delta, penalty, kind):
    mc = z.shape[0]
    m = pack.n_records
    th = theta_from_z(z)
    p, P, q, Q, r, R, e_irr = (th[:, i : i + 1] for i in range(7))

    preds = np.empty((mc, m))
    dpred = np.zeros((mc, m, 7))  # d pred / d theta

    # zeta tails, grouped by distinct model size
    zt = np.empty((mc, pack.rec_N.size))
    zt_dp = np.empty_like(zt)
    for n in np.unique(pack.rec_N):
        cols = pack.rec_N == n
        v, d = _zeta_tail_dp(th[:, 0], int(n))
        zt[:, cols] = v[:, None]
        zt_dp[:, cols] = d[:, None]

    if pack.k0_idx.size:
        # steps = 0: the whole mode sum is untouched, loss = e_irr + P*zeta(p)
        z0, z0_dp = _zeta_tail_dp(th[:, 0], 0)
        preds[:, pack.k0_idx] = e_irr + P * z0[:, None]
        dpred[:, pack.k0_idx, 0] = P * z0_dp[:, None]
        dpred[:, pack.k0_idx, 1] = z0[:, None]
    dpred[:, :, 6] = 1.0

    if pack.pos_idx.size:
        lu = pack.node_lu
        w = pack.node_w
        K2 = 2.0 * pack.node_K
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            e_p = np.exp(-p * lu)
            e_q = np.exp(-q * lu)
            e_r = np.exp(-r * lu)
            t = Q * e_q
            rho = 1.0 - t
            la = np.log(np.abs(rho))
            em_num = np.expm1(K2 * la)
            big_e = em_num + 1.0
            r2m1 = rho * rho - 1.0
            branch = np.abs(r2m1) < BRANCH_TOL
            em_den = np.expm1(2.0 * la)
            geom = np.where(branch, pack.node_K, em_num / np.where(branch, 1.0, em_den))
            inv_rho = np.where(rho == 0.0, 0.0, 1.0 / np.where(rho == 0.0, 1.0, rho))

            bias = P * e_p * big_e
            coef = (Q * R) * pack.node_invB
            var_core = coef * e_q * e_r
            var = var_core * geom

            # d geom / d la via the quotient rule; zero in the branch
            dgeom_la = np.where(
                branch,
                0.0,
                (K2 * big_e * em_den - em_num * 2.0 * (em_den + 1.0))
                / np.where(branch, 1.0, em_den * em_den),
            )
            dla_dq = lu * t * inv_rho  # d la / d q  (via d t/d q = -lu*t)
            dla_dQ = -e_q * inv_rho  # d la / d Q

            wsum = _seg_sum(w * (bias + var), pack)
            d_p = _seg_sum(w * (-lu) * bias, pack)
            d_bias_q = w * bias * K2 * dla_dq
            d_bias_Q = w * bias * K2 * dla_dQ
            d_var_q = w * (-lu * var + var_core * dgeom_la * dla_dq)
            d_var_Q = w * (var / Q + var_core * dgeom_la * dla_dQ)
            d_q = _seg_sum(np.where(big_e > 0.0, d_bias_q, 0.0) + d_var_q, pack)
            d_Q = _seg_sum(np.where(big_e > 0.0, d_bias_Q, 0.0) + d_var_Q, pack)
            d_r = _seg_sum(w * (-lu) * var, pack)
            d_R = _seg_sum(w * var, pack) / R
            bias_tot = _seg_sum(w * bias, pack)

        cols = pack.pos_idx
        preds[:, cols] = e_irr + P * zt + wsum
        dpred[:, cols, 0] = P * zt_dp + d_p
        dpred[:, cols, 1] = zt + bias_tot / P
        dpred[:, cols, 2] = d_q
        dpred[:, cols, 3] = d_Q
        dpred[:, cols, 4] = d_r
        dpred[:, cols, 5] = d_R

    # records that diverge (Q >= 2 with steps > 0) or predict <= 0 get the penalty
    with np.errstate(invalid="ignore"):
        bad = preds <= 0.0
        bad |= ~np.isfinite(preds)
    if pack.pos_idx.size:
        flagged = th[:, 3] >= 2.0
        bad[flagged[:, None] & np.isin(np.arange(m), pack.pos_idx)[None, :]] = True

    dpred[bad] = 0.0  # keep non-finite columns of diverged records out of the reduction
    with np.errstate(divide="ignore", invalid="ignore"):
        res = np.where(bad, 0.0, np.log(np.where(bad, 1.0, preds))) - pack.log_loss
        if kind == KIND_HUBER:
            contrib = np.where(
                np.abs(res) <= delta, 0.5 * res * res, delta * (np.abs(res) - 0.5 * delta)
            )
            dres = np.clip(res, -delta, delta)
        else:
            contrib = res * res
            dres = 2.0 * res
        contrib = np.where(bad, penalty, contrib)
        scale = np.where(bad, 0.0, dres / np.where(bad, 1.0, preds)) / m
        grad_theta = np.einsum("im,imj->ij", scale, dpred)

    obj = contrib.mean(axis=1)
    chain = np.concatenate([th[:, 0:1] - 1.0, th[:, 1:6], np.ones((mc, 1))], axis=1)
    return obj, grad_theta * chain


def _seg_sum(node_vals: np.ndarray, pack: Pack) -> np.ndarray:
    return np.add.reduceat(node_vals, pack.rec_ptr[:-1], axis=-1)


def adam_fit(
    z0: np.ndarray,
    pack: Pack,
    n_iters: int,
    lr: float,
    beta1: float,
    beta2: float,
    adam_eps: float,
    clip: float,
    delta: float,
    penalty: float,
    kind: int,
    threads: int = 1,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run Adam from every initial point in lockstep, tracking best iterates.

    Returns (best_z, best_objective, best_iteration) per initial point.
    The final point after the last update is also evaluated. ``threads``
    is accepted for interface parity; this lane is single-threaded.
    """
    z = np.array(z0, dtype=float, copy=True)
    n_init = z.shape[0]
    m1 = np.zeros_like(z)
    m2 = np.zeros_like(z)
    best_z = z.copy()
    best_obj = np.full(n_init, np.inf)
    best_iter = np.zeros(n_init, dtype=np.int64)
    for it in range(n_iters + 1):
        obj, grad = objective_batch(z, pack, delta, penalty, kind)
        better = obj < best_obj
        best_obj = np.where(better, obj, best_obj)
        best_iter = np.where(better, it, best_iter)
        best_z[better] = z[better]
        if it == n_iters:
            break
        grad = np.clip(grad, -clip, clip)
        m1 = beta1 * m1 + (1.0 - beta1) * grad
        m2 = beta2 * m2 + (1.0 - beta2) * grad * grad
        bc1 = 1.0 - beta1 ** (it + 1)
        bc2 = 1.0 - beta2 ** (it + 1)
        z -= lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + adam_eps)
    return best_z, best_obj, best_iter
