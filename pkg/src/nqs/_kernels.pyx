# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementation of the fitting kernel.

Same contract as _kernels_py: objective_batch and adam_fit over the shared
Pack layout, with identical formulas, guards, and best-iterate tracking.
The per-candidate loop releases the GIL and runs under OpenMP when the
extension was built with it; otherwise it runs serially.
"""

import numpy as np

from cython.parallel cimport prange
from libc.math cimport INFINITY, exp, expm1, fabs, isfinite, log, pow, sqrt

cdef enum:
    NPAR = 7

cdef double BRANCH_TOL = 1e-12


cdef struct Pk:
    double* node_lu
    double* node_w
    double* node_K
    double* node_invB
    long long* rec_ptr
    long long* rec_N
    long long* pos_idx
    long long* k0_idx
    double* log_loss
    int m
    int n_pos
    int n_k0


cdef void _zeta_tail_dp(double p, long long n_start, double* val, double* dp) noexcept nogil:
    cdef long long first = n_start + 1
    if first < 64:
        first = 64
    cdef double v = 0.0, d = 0.0
    cdef long long n
    cdef double ln, e
    for n in range(n_start + 1, first):
        ln = log(<double> n)
        e = exp(-p * ln)
        v += e
        d -= e * ln
    cdef double m = <double> first
    cdef double lm = log(m)
    e = exp(-p * lm)
    cdef double m3 = m * m * m
    cdef double m5 = m3 * m * m
    cdef double b0 = m / (p - 1.0)
    cdef double b1 = p / (12.0 * m)
    cdef double b2 = p * (p + 1.0) * (p + 2.0) / (720.0 * m3)
    cdef double b3 = p * (p + 1.0) * (p + 2.0) * (p + 3.0) * (p + 4.0) / (30240.0 * m5)
    cdef double bracket = b0 + 0.5 + b1 - b2 + b3
    cdef double dbracket = (
        -m / ((p - 1.0) * (p - 1.0))
        + 1.0 / (12.0 * m)
        - (3.0 * p * p + 6.0 * p + 2.0) / (720.0 * m3)
        + (5.0 * p * p * p * p + 40.0 * p * p * p + 105.0 * p * p + 100.0 * p + 24.0)
        / (30240.0 * m5)
    )
    val[0] = v + e * bracket
    dp[0] = d + e * (dbracket - lm * bracket)


cdef inline void _residual(double pred, double obs_log, double delta, int kind,
                           double* contrib, double* dres) noexcept nogil:
    cdef double res = log(pred) - obs_log
    if kind == 0:
        if fabs(res) <= delta:
            contrib[0] = 0.5 * res * res
            dres[0] = res
        else:
            contrib[0] = delta * (fabs(res) - 0.5 * delta)
            dres[0] = delta if res > 0.0 else -delta
    else:
        contrib[0] = res * res
        dres[0] = 2.0 * res


cdef double _eval_one(Pk pk, double* zrow, double* gout,
                      double delta, double penalty, int kind) noexcept nogil:
    cdef double p = 1.0 + exp(zrow[0])
    cdef double P = exp(zrow[1])
    cdef double q = exp(zrow[2])
    cdef double Q = exp(zrow[3])
    cdef double r = exp(zrow[4])
    cdef double R = exp(zrow[5])
    cdef double e_irr = zrow[6]
    cdef bint flagged = Q >= 2.0

    cdef double obj = 0.0
    cdef double g[NPAR]
    cdef int c
    for c in range(NPAR):
        g[c] = 0.0

    cdef double zv, zd, pred, contrib, dres, s
    cdef int jj, j, rr
    cdef long long node, lo_n, hi_n

    if pk.n_k0 > 0:
        # steps = 0: the whole mode sum is untouched, loss = e_irr + P*zeta(p)
        _zeta_tail_dp(p, 0, &zv, &zd)
        pred = e_irr + P * zv
        for jj in range(pk.n_k0):
            j = <int> pk.k0_idx[jj]
            if pred > 0.0 and isfinite(pred):
                _residual(pred, pk.log_loss[j], delta, kind, &contrib, &dres)
                obj += contrib
                s = dres / pred / pk.m
                g[0] += s * (P * zd)
                g[1] += s * zv
                g[6] += s
            else:
                obj += penalty

    cdef double lu, w, K2, nodeK, invB
    cdef double e_p, e_q, e_r, t, rho, la, em_num, big_e, r2m1, em_den
    cdef double geom, dgeom_la, inv_rho, bias, coef, var_core, var
    cdef double dla_dq, dla_dQ
    cdef double wsum, d_p, d_q, d_Q, d_r, d_R_tot, bias_tot
    cdef double ztv, ztd

    for rr in range(pk.n_pos):
        j = <int> pk.pos_idx[rr]
        if flagged:
            # mode n = 1 diverges whenever Q >= 2; flat penalty, zero gradient
            obj += penalty
            continue
        _zeta_tail_dp(p, pk.rec_N[rr], &ztv, &ztd)
        wsum = 0.0
        d_p = 0.0
        d_q = 0.0
        d_Q = 0.0
        d_r = 0.0
        d_R_tot = 0.0
        bias_tot = 0.0
        lo_n = pk.rec_ptr[rr]
        hi_n = pk.rec_ptr[rr + 1]
        for node in range(lo_n, hi_n):
            lu = pk.node_lu[node]
            w = pk.node_w[node]
            nodeK = pk.node_K[node]
            K2 = 2.0 * nodeK
            invB = pk.node_invB[node]
            e_p = exp(-p * lu)
            e_q = exp(-q * lu)
            e_r = exp(-r * lu)
            t = Q * e_q
            rho = 1.0 - t
            la = log(fabs(rho))
            em_num = expm1(K2 * la)
            big_e = em_num + 1.0
            r2m1 = rho * rho - 1.0
            if fabs(r2m1) < BRANCH_TOL:
                geom = nodeK
                dgeom_la = 0.0
            else:
                em_den = expm1(2.0 * la)
                geom = em_num / em_den
                dgeom_la = (K2 * big_e * em_den - em_num * 2.0 * (em_den + 1.0)) / (em_den * em_den)
            inv_rho = 0.0 if rho == 0.0 else 1.0 / rho

            bias = P * e_p * big_e
            coef = (Q * R) * invB
            var_core = coef * e_q * e_r
            var = var_core * geom

            dla_dq = lu * t * inv_rho
            dla_dQ = -e_q * inv_rho

            wsum += w * (bias + var)
            d_p += w * (-lu) * bias
            bias_tot += w * bias
            if big_e > 0.0:
                d_q += w * bias * K2 * dla_dq
                d_Q += w * bias * K2 * dla_dQ
            d_q += w * (-lu * var + var_core * dgeom_la * dla_dq)
            d_Q += w * (var / Q + var_core * dgeom_la * dla_dQ)
            d_r += w * (-lu) * var
            d_R_tot += w * var

        pred = e_irr + P * ztv + wsum
        if pred > 0.0 and isfinite(pred):
            _residual(pred, pk.log_loss[j], delta, kind, &contrib, &dres)
            obj += contrib
            s = dres / pred / pk.m
            g[0] += s * (P * ztd + d_p)
            g[1] += s * (ztv + bias_tot / P)
            g[2] += s * d_q
            g[3] += s * d_Q
            g[4] += s * d_r
            g[5] += s * d_R_tot / R
            g[6] += s
        else:
            obj += penalty

    gout[0] = g[0] * (p - 1.0)
    gout[1] = g[1] * P
    gout[2] = g[2] * q
    gout[3] = g[3] * Q
    gout[4] = g[4] * r
    gout[5] = g[5] * R
    gout[6] = g[6]
    return obj / pk.m


cdef Pk _pack_ptrs(object pack,
                   double[::1] node_lu, double[::1] node_w, double[::1] node_K,
                   double[::1] node_invB, long long[::1] rec_ptr, long long[::1] rec_N,
                   long long[::1] pos_idx, long long[::1] k0_idx, double[::1] log_loss):
    cdef Pk pk
    pk.node_lu = &node_lu[0] if node_lu.shape[0] else NULL
    pk.node_w = &node_w[0] if node_w.shape[0] else NULL
    pk.node_K = &node_K[0] if node_K.shape[0] else NULL
    pk.node_invB = &node_invB[0] if node_invB.shape[0] else NULL
    pk.rec_ptr = &rec_ptr[0]
    pk.rec_N = &rec_N[0] if rec_N.shape[0] else NULL
    pk.pos_idx = &pos_idx[0] if pos_idx.shape[0] else NULL
    pk.k0_idx = &k0_idx[0] if k0_idx.shape[0] else NULL
    pk.log_loss = &log_loss[0] if log_loss.shape[0] else NULL
    pk.m = <int> pack.n_records
    pk.n_pos = <int> pos_idx.shape[0]
    pk.n_k0 = <int> k0_idx.shape[0]
    return pk


def objective_batch(z, pack, double delta=1e-3, double penalty=1e6, int kind=0):
    """Objective and z-gradient for a batch of parameter vectors (M, 7)."""
    cdef double[:, ::1] zv = np.ascontiguousarray(np.atleast_2d(np.asarray(z, dtype=float)))
    cdef int n_init = zv.shape[0]
    if zv.shape[1] != NPAR:
        raise ValueError(f"expected {NPAR} parameters per row, got {zv.shape[1]}")
    obj_arr = np.empty(n_init)
    grad_arr = np.empty((n_init, NPAR))
    cdef double[::1] obj = obj_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Pk pk = _pack_ptrs(
        pack, pack.node_lu, pack.node_w, pack.node_K, pack.node_invB,
        pack.rec_ptr, pack.rec_N, pack.pos_idx, pack.k0_idx, pack.log_loss,
    )
    cdef int i
    with nogil:
        for i in range(n_init):
            obj[i] = _eval_one(pk, &zv[i, 0], &grad[i, 0], delta, penalty, kind)
    return obj_arr, grad_arr


cdef void _adam_one(Pk pk, double* z, double* best_z, double* best_obj,
                    long long* best_iter, int n_iters, double lr, double beta1,
                    double beta2, double adam_eps, double clip, double delta,
                    double penalty, int kind) noexcept nogil:
    cdef double m1[NPAR]
    cdef double m2[NPAR]
    cdef double g[NPAR]
    cdef int c, it
    cdef double obj, gc, bc1, bc2
    for c in range(NPAR):
        m1[c] = 0.0
        m2[c] = 0.0
    best_obj[0] = INFINITY
    best_iter[0] = 0
    for it in range(n_iters + 1):
        obj = _eval_one(pk, z, g, delta, penalty, kind)
        if obj < best_obj[0]:
            best_obj[0] = obj
            best_iter[0] = it
            for c in range(NPAR):
                best_z[c] = z[c]
        if it == n_iters:
            break
        bc1 = 1.0 - pow(beta1, it + 1)
        bc2 = 1.0 - pow(beta2, it + 1)
        for c in range(NPAR):
            gc = g[c]
            if gc > clip:
                gc = clip
            elif gc < -clip:
                gc = -clip
            m1[c] = beta1 * m1[c] + (1.0 - beta1) * gc
            m2[c] = beta2 * m2[c] + (1.0 - beta2) * gc * gc
            z[c] = z[c] - lr * (m1[c] / bc1) / (sqrt(m2[c] / bc2) + adam_eps)


def adam_fit(z0, pack, int n_iters, double lr, double beta1, double beta2,
             double adam_eps, double clip, double delta, double penalty,
             int kind, int threads=1):
    """Run Adam from every initial point, tracking the best iterate of each.

    Returns (best_z, best_objective, best_iteration) per initial point. The
    final point after the last update is also evaluated. Candidates are
    independent; with OpenMP they run threads at a time.
    """
    z_arr = np.array(z0, dtype=float, copy=True, order="C")
    if z_arr.ndim != 2 or z_arr.shape[1] != NPAR:
        raise ValueError(f"z0 must be (n_init, {NPAR})")
    cdef int n_init = z_arr.shape[0]
    best_z_arr = z_arr.copy()
    best_obj_arr = np.full(n_init, np.inf)
    best_iter_arr = np.zeros(n_init, dtype=np.int64)
    cdef double[:, ::1] zv = z_arr
    cdef double[:, ::1] bz = best_z_arr
    cdef double[::1] bo = best_obj_arr
    cdef long long[::1] bi = best_iter_arr
    cdef Pk pk = _pack_ptrs(
        pack, pack.node_lu, pack.node_w, pack.node_K, pack.node_invB,
        pack.rec_ptr, pack.rec_N, pack.pos_idx, pack.k0_idx, pack.log_loss,
    )
    if threads < 1:
        threads = 1
    cdef int nthreads = threads
    cdef int i
    for i in prange(n_init, nogil=True, schedule="static", num_threads=nthreads):
        _adam_one(pk, &zv[i, 0], &bz[i, 0], &bo[i], &bi[i], n_iters, lr,
                  beta1, beta2, adam_eps, clip, delta, penalty, kind)
    return best_z_arr, best_obj_arr, best_iter_arr
