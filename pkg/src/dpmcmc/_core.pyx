# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled filtering kernels.

Same functions and return values as ``_core_py`` for scalar observations
with Markov or Polya-urn transitions.  The arithmetic follows the numpy
version step for step so both backends take the same resampling decisions
for the same uniforms (up to last-bit rounding on exact ties).
"""

import math

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, floor, isfinite, llround, lgamma, log, sqrt
from libc.stdlib cimport qsort

from ._core_py import DegenerateFilterError

cnp.import_array()

cdef int MARKOV = 0
cdef int POLYA = 1
cdef double LOG_2PI = 1.8378770664093453
cdef double DET_FLOOR = 1e-300


# -- resampling -----------------------------------------------------------------


cdef int _cmp_desc(const void* a, const void* b) noexcept nogil:
    cdef double x = (<const double*>a)[0]
    cdef double y = (<const double*>b)[0]
    return (x < y) - (x > y)


cdef double _threshold(const double* w, Py_ssize_t M, Py_ssize_t N, double* ws, double* tail,
                       Py_ssize_t* L_out) noexcept nogil:
    """C solving sum min(1, C w) = N; INFINITY for keep-all, -1 when all weights vanish."""
    cdef Py_ssize_t i, k, npos = 0
    cdef double C
    if M <= N:
        L_out[0] = M
        return INFINITY
    for i in range(M):
        if w[i] > 0:
            npos += 1
    if npos == 0:
        return -1.0
    if npos <= N:
        L_out[0] = npos
        return INFINITY
    for i in range(M):
        ws[i] = w[i]
    qsort(ws, M, sizeof(double), _cmp_desc)
    tail[M - 1] = ws[M - 1]
    i = M - 2
    while i >= 0:
        tail[i] = tail[i + 1] + ws[i]
        i -= 1
    k = 0
    for i in range(N):
        if ws[i] * (N - i) <= tail[i]:
            k = i
            break
    C = (N - k) / tail[k]
    L_out[0] = 0
    for i in range(M):
        if w[i] * C > 1.0:
            L_out[0] += 1
    return C


cdef void _cumulative(const double* w, Py_ssize_t M, double* q) noexcept nogil:
    cdef long double acc = 0.0, total = 0.0
    cdef Py_ssize_t i
    for i in range(M):
        total += w[i]
    for i in range(M):
        acc += w[i]
        q[i] = <double>(acc / total)
    q[M - 1] = 1.0


cdef void _grid_select(const double* q, Py_ssize_t M, Py_ssize_t n, double u1, Py_ssize_t* out) noexcept nogil:
    cdef Py_ssize_t i = 0, j
    cdef double g
    for j in range(n):
        g = u1 + (<double>j) / n
        while i < M - 1 and q[i] < g:
            i += 1
        out[j] = i


cdef void _conditional_select(const double* q, Py_ssize_t M, Py_ssize_t kappa, Py_ssize_t n, double u,
                              Py_ssize_t* out) noexcept nogil:
    cdef double lo = q[kappa - 1] if kappa > 0 else 0.0
    cdef double hi = q[kappa]
    cdef double ustar = lo + u * (hi - lo)
    cdef double u1 = ustar - floor(n * ustar) / n
    cdef Py_ssize_t jstar
    if u1 <= 0.0:
        u1 = u1 + 1.0 / n
    _grid_select(q, M, n, u1, out)
    # the grid point at U* selects kappa; assign it explicitly in case the
    # interval of kappa is narrower than the float spacing of Q
    jstar = <Py_ssize_t>llround((ustar - u1) * n)
    if jstar < 0:
        jstar = 0
    elif jstar > n - 1:
        jstar = n - 1
    out[jstar] = kappa


def solve_threshold(w, Py_ssize_t N):
    """Solve sum_i min(1, C w_i) = N.  Returns (C, L) with C = inf for keep-all."""
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=float)
    cdef Py_ssize_t M = wv.shape[0], L = 0
    cdef double[::1] ws = np.empty(max(M, 1))
    cdef double[::1] tail = np.empty(max(M, 1))
    cdef double C = _threshold(&wv[0], M, N, &ws[0], &tail[0], &L)
    if C < 0:
        raise DegenerateFilterError("all weights are zero")
    return (math.inf if C == INFINITY else float(C)), int(L)


def stratified_indices(w, Py_ssize_t n, u):
    """Stratified selection of ``n`` of the weighted items; u in (0, 1]."""
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=float)
    cdef Py_ssize_t M = wv.shape[0], r
    cdef double[::1] q = np.empty(M)
    _cumulative(&wv[0], M, &q[0])
    ua = np.asarray(u, dtype=float)
    cdef double[::1] uf = np.ascontiguousarray(ua.reshape(-1))
    out = np.empty((uf.shape[0], n), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    for r in range(uf.shape[0]):
        _grid_select(&q[0], M, n, uf[r] / n, <Py_ssize_t*>&ov[r, 0])
    return out.reshape(ua.shape + (n,))


def conditional_stratified_indices(w, Py_ssize_t kappa, Py_ssize_t n, u):
    """Stratified selection forced to include item ``kappa``; u in (0, 1]."""
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=float)
    cdef Py_ssize_t M = wv.shape[0], r
    cdef double[::1] q = np.empty(M)
    _cumulative(&wv[0], M, &q[0])
    if not wv[kappa] > 0:
        raise ValueError(f"conditioned item {kappa} has zero weight")
    ua = np.asarray(u, dtype=float)
    cdef double[::1] uf = np.ascontiguousarray(ua.reshape(-1))
    out = np.empty((uf.shape[0], n), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    for r in range(uf.shape[0]):
        _conditional_select(&q[0], M, kappa, n, uf[r], <Py_ssize_t*>&ov[r, 0])
    return out.reshape(ua.shape + (n,))


cdef struct ResampleWork:
    double* ws
    double* tail
    double* rw
    double* q
    Py_ssize_t* resid
    Py_ssize_t* pick
    char* flag


cdef int _resample(const double* W, Py_ssize_t M, Py_ssize_t N, double u, Py_ssize_t kappa, ResampleWork* wk,
                   Py_ssize_t* surv, double* lfac, Py_ssize_t* S_out, double* C_out, Py_ssize_t* L_out) noexcept nogil:
    """Threshold resampling; returns 1 when all weights vanish, 2 when the conditioned item has zero weight."""
    cdef Py_ssize_t i, L = 0, nres = 0, ns, S = 0, kr = -1
    cdef double C = _threshold(W, M, N, wk.ws, wk.tail, &L)
    if C < 0:
        return 1
    C_out[0] = C
    L_out[0] = L
    if C == INFINITY:
        for i in range(M):
            if M <= N or W[i] > 0:
                surv[S] = i
                lfac[S] = log(W[i]) if W[i] > 0 else -INFINITY
                S += 1
        S_out[0] = S
        return 0
    for i in range(M):
        wk.flag[i] = 1 if W[i] * C > 1.0 else 0
        if not wk.flag[i]:
            if i == kappa:
                kr = nres
            wk.resid[nres] = i
            wk.rw[nres] = W[i]
            nres += 1
    ns = N - L
    _cumulative(wk.rw, nres, wk.q)
    if kr >= 0:
        if not wk.rw[kr] > 0:
            return 2
        _conditional_select(wk.q, nres, kr, ns, u, wk.pick)
    else:
        _grid_select(wk.q, nres, ns, u / ns, wk.pick)
    for i in range(ns):
        wk.flag[wk.resid[wk.pick[i]]] = 2
    for i in range(M):
        if wk.flag[i] == 1:
            surv[S] = i
            lfac[S] = log(W[i])
            S += 1
        elif wk.flag[i] == 2:
            surv[S] = i
            lfac[S] = -log(C)
            S += 1
    S_out[0] = S
    return 0


cdef class _Workspace:
    cdef object arrays
    cdef ResampleWork wk

    def __cinit__(self, Py_ssize_t M):
        cdef double[::1] ws, tail, rw, q
        cdef cnp.int64_t[::1] resid, pick
        cdef char[::1] flag
        M = max(M, 1)
        ws, tail, rw, q = np.empty(M), np.empty(M), np.empty(M), np.empty(M)
        resid, pick = np.empty(M, dtype=np.int64), np.empty(M, dtype=np.int64)
        flag = np.empty(M, dtype=np.int8)
        self.arrays = (ws, tail, rw, q, resid, pick, flag)
        self.wk.ws, self.wk.tail, self.wk.rw, self.wk.q = &ws[0], &tail[0], &rw[0], &q[0]
        self.wk.resid, self.wk.pick = <Py_ssize_t*>&resid[0], <Py_ssize_t*>&pick[0]
        self.wk.flag = &flag[0]


def optimal_resample(W, Py_ssize_t N, double u, Py_ssize_t kappa=-1):
    """Threshold resampling of normalised weights ``W`` down to N survivors.

    Returns ``(survivors, log_factor, C, L)``.
    """
    cdef double[::1] wv = np.ascontiguousarray(W, dtype=float)
    cdef Py_ssize_t M = wv.shape[0], S = 0, L = 0
    cdef double C = 0.0
    cdef _Workspace ws = _Workspace(M)
    surv = np.empty(max(M, 1), dtype=np.int64)
    lf = np.empty(max(M, 1))
    cdef cnp.int64_t[::1] sv = surv
    cdef double[::1] lv = lf
    cdef int rc = _resample(&wv[0], M, N, u, kappa, &ws.wk, <Py_ssize_t*>&sv[0], &lv[0], &S, &C, &L)
    if rc == 1:
        raise DegenerateFilterError("all weights are zero")
    if rc == 2:
        raise ValueError(f"conditioned item {kappa} has zero weight")
    return surv[:S].copy(), lf[:S].copy(), (math.inf if C == INFINITY else float(C)), int(L)


# -- forward pass -----------------------------------------------------------------


cdef inline double _kalman(const double* A, const double* Qm, const double* c, double r, const double* fu, double gu,
                           double y, const double* m, const double* P, Py_ssize_t dz,
                           double* mf, double* Pf, double* tmp, double* h) noexcept nogil:
    """Scalar-observation predict/update; returns the log predictive density or NaN if degenerate."""
    cdef Py_ssize_t i, j, l
    cdef double acc, s, e, ym
    for i in range(dz):
        acc = 0.0
        for j in range(dz):
            acc = acc + A[i * dz + j] * m[j]
        mf[i] = acc + fu[i]
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + A[i * dz + l] * P[l * dz + j]
            tmp[i * dz + j] = acc
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + tmp[i * dz + l] * A[j * dz + l]
            Pf[i * dz + j] = acc + Qm[i * dz + j]
    for i in range(dz):
        for j in range(i + 1, dz):
            acc = 0.5 * (Pf[i * dz + j] + Pf[j * dz + i])
            Pf[i * dz + j] = acc
            Pf[j * dz + i] = acc
    ym = gu
    acc = 0.0
    for j in range(dz):
        acc = acc + c[j] * mf[j]
    ym = acc + gu
    for i in range(dz):
        acc = 0.0
        for j in range(dz):
            acc = acc + Pf[i * dz + j] * c[j]
        h[i] = acc
    s = r
    acc = 0.0
    for i in range(dz):
        acc = acc + c[i] * h[i]
    s = acc + r
    if not s > DET_FLOOR:
        return 0.0 / 0.0
    e = y - ym
    for i in range(dz):
        mf[i] = mf[i] + h[i] * (e / s)
    for i in range(dz):
        for j in range(dz):
            Pf[i * dz + j] = Pf[i * dz + j] - h[i] * h[j] / s
    for i in range(dz):
        for j in range(i + 1, dz):
            acc = 0.5 * (Pf[i * dz + j] + Pf[j * dz + i])
            Pf[i * dz + j] = acc
            Pf[j * dz + i] = acc
    return -0.5 * (LOG_2PI + log(s) + e * e / s)


def _capacity(Py_ssize_t N, Py_ssize_t K, Py_ssize_t T):
    caps = np.empty(T, dtype=np.int64)
    cdef Py_ssize_t c = 1, t
    for t in range(T):
        c = min(c * K, N * K)
        caps[t] = c
    return caps


def forward(A, Q, C, R, fu, gu, y, m0, P0, log_nu, int trans_kind, trans_param, Py_ssize_t N, uniforms, ref,
            bint store, trans_fn=None):
    """Discrete particle filter forward pass (scalar observations)."""
    if trans_fn is not None or trans_kind not in (MARKOV, POLYA):
        raise NotImplementedError("compiled kernel handles Markov and Polya transitions only")
    cdef double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, :, ::1] Qv = np.ascontiguousarray(Q, dtype=float)
    cdef double[:, ::1] cv = np.ascontiguousarray(np.asarray(C, dtype=float)[:, 0, :])
    cdef double[::1] rv = np.ascontiguousarray(np.asarray(R, dtype=float)[:, 0, 0])
    cdef double[:, :, ::1] fuv = np.ascontiguousarray(fu, dtype=float)
    cdef double[:, ::1] guv = np.ascontiguousarray(np.asarray(gu, dtype=float)[:, :, 0])
    cdef double[::1] yv = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(-1))
    cdef double[::1] m0v = np.ascontiguousarray(m0, dtype=float)
    cdef double[:, ::1] P0v = np.ascontiguousarray(P0, dtype=float)
    cdef double[::1] lnu = np.ascontiguousarray(log_nu, dtype=float)
    cdef double[:, ::1] tp = np.ascontiguousarray(trans_param, dtype=float)
    cdef double[::1] uv = np.ascontiguousarray(uniforms, dtype=float)
    cdef cnp.int64_t[::1] refv = np.ascontiguousarray(ref, dtype=np.int64)
    cdef Py_ssize_t T = yv.shape[0], K = Av.shape[0], dz = Av.shape[1]
    caps = _capacity(N, K, T)
    cdef Py_ssize_t cap = int(caps.max())
    cdef bint conditional = refv.shape[0] > 0
    cdef bint polya = trans_kind == POLYA

    sizes_a = np.zeros(T, dtype=np.int64)
    states_a = np.full((T, cap), -1, dtype=np.int64)
    parents_a = np.full((T, cap), -1, dtype=np.int64)
    lwbar_a = np.full((T, cap), -np.inf)
    logw_a = np.full((T, cap), -np.inf)
    log_incr_a = np.zeros(T)
    thresholds_a = np.full(T, np.nan)
    n_maint_a = np.zeros(T, dtype=np.int64)
    kappa_a = np.full(T, -1, dtype=np.int64)
    means_a = np.zeros((T, cap, dz)) if store else None
    covs_a = np.zeros((T, cap, dz, dz)) if store else None
    counts_a = np.zeros((T, cap, K, K), dtype=np.int32) if (store and polya) else None
    cdef cnp.int64_t[::1] sizes = sizes_a
    cdef cnp.int64_t[:, ::1] states = states_a
    cdef cnp.int64_t[:, ::1] parents = parents_a
    cdef double[:, ::1] lwbar = lwbar_a
    cdef double[:, ::1] logw = logw_a
    cdef double[::1] log_incr = log_incr_a
    cdef double[::1] thresholds = thresholds_a
    cdef cnp.int64_t[::1] n_maint = n_maint_a
    cdef cnp.int64_t[::1] kappa = kappa_a
    cdef double[:, :, ::1] means_v
    cdef double[:, :, :, ::1] covs_v
    cdef int[:, :, :, ::1] counts_v
    if store:
        means_v = means_a
        covs_v = covs_a
        if polya:
            counts_v = counts_a

    # double-buffered particle state: index 0/1 selects the buffer
    cdef double[:, :, ::1] mbuf = np.zeros((2, cap, dz))
    cdef double[:, :, :, ::1] Pbuf = np.zeros((2, cap, dz, dz))
    cdef int[:, :, :, ::1] cbuf = np.zeros((2, cap if polya else 1, K, K), dtype=np.int32)
    cdef double[::1] W = np.empty(cap)
    cdef double[::1] lfac = np.zeros(cap)
    cdef cnp.int64_t[::1] surv = np.zeros(cap, dtype=np.int64)
    cdef double[::1] lw = np.empty(cap)
    cdef double[::1] tmp = np.empty(dz * dz)
    cdef double[::1] hv = np.empty(dz)
    cdef _Workspace wsp = _Workspace(cap)
    cdef int cur = 0, nxt = 1, rc
    cdef Py_ssize_t t, s, k, i, j, p, M, S, L, kref = 0, pos, st, a, b
    cdef double Cth, ll, lt, mx, tot, lz, arow

    for i in range(dz):
        mbuf[cur, 0, i] = m0v[i]
        for j in range(dz):
            Pbuf[cur, 0, i, j] = P0v[i, j]
    for t in range(T):
        if t == 0:
            S = 1
            surv[0] = 0
            lfac[0] = 0.0
        else:
            M = sizes[t - 1]
            for i in range(M):
                W[i] = exp(logw[t - 1, i])
            rc = _resample(&W[0], M, N, uv[t], kref if conditional else -1, &wsp.wk,
                           <Py_ssize_t*>&surv[0], &lfac[0], &S, &Cth, &L)
            if rc == 1:
                raise DegenerateFilterError("all weights are zero")
            if rc == 2:
                raise DegenerateFilterError(f"reference path has zero weight at time {t}")
            thresholds[t - 1] = Cth
            n_maint[t - 1] = L
            if conditional:
                pos = -1
                for i in range(S):
                    if surv[i] == kref:
                        pos = i
                        break
                if pos < 0:
                    raise RuntimeError(f"reference path lost at time {t}")
                kref = pos
        with nogil:
            for s in range(S):
                p = surv[s]
                st = states[t - 1, p] if t > 0 else 0
                if polya and t > 0:
                    arow = 0.0
                    for b in range(K):
                        arow = arow + (tp[st, b] + cbuf[cur, p, st, b])
                for k in range(K):
                    i = s * K + k
                    ll = _kalman(&Av[k, 0, 0], &Qv[k, 0, 0], &cv[k, 0], rv[k], &fuv[t, k, 0], guv[t, k], yv[t],
                                 &mbuf[cur, p, 0], &Pbuf[cur, p, 0, 0], dz,
                                 &mbuf[nxt, i, 0], &Pbuf[nxt, i, 0, 0], &tmp[0], &hv[0])
                    if ll != ll:
                        with gil:
                            raise DegenerateFilterError(f"innovation variance is not positive at time {t + 1}")
                    if t == 0:
                        lt = lnu[k]
                    elif polya:
                        lt = log(tp[st, k] + cbuf[cur, p, st, k]) - log(arow)
                    else:
                        lt = tp[st, k]
                    lw[i] = lt + ll + lfac[s]
                    states[t, i] = k
                    parents[t, i] = p
                    if polya:
                        for a in range(K):
                            for b in range(K):
                                cbuf[nxt, i, a, b] = cbuf[cur, p, a, b] if t > 0 else 0
                        if t > 0:
                            cbuf[nxt, i, st, k] += 1
        M = S * K
        mx = -INFINITY
        for i in range(M):
            if lw[i] > mx:
                mx = lw[i]
        if not isfinite(mx):
            raise DegenerateFilterError(f"all particle weights are zero at time {t + 1}")
        tot = 0.0
        for i in range(M):
            tot = tot + exp(lw[i] - mx)
        lz = mx + log(tot)
        sizes[t] = M
        log_incr[t] = lz
        for i in range(M):
            lwbar[t, i] = lw[i]
            logw[t, i] = lw[i] - lz
        if store:
            for i in range(M):
                for a in range(dz):
                    means_v[t, i, a] = mbuf[nxt, i, a]
                    for b in range(dz):
                        covs_v[t, i, a, b] = Pbuf[nxt, i, a, b]
                if polya:
                    for a in range(K):
                        for b in range(K):
                            counts_v[t, i, a, b] = cbuf[nxt, i, a, b]
        if conditional:
            kref = kref * K + refv[t]
            if not isfinite(lw[kref]):
                raise DegenerateFilterError(f"reference path has zero weight at time {t + 1}")
            kappa[t] = kref
        cur, nxt = nxt, cur
    return dict(
        sizes=sizes_a, states=states_a, parents=parents_a, lwbar=lwbar_a, logw=logw_a, log_incr=log_incr_a,
        thresholds=thresholds_a, n_maint=n_maint_a, kappa=kappa_a, means=means_a, covs=covs_a, counts=counts_a,
    )


# -- small dense linear algebra -----------------------------------------------------


cdef double _lu_solve(double* Mx, Py_ssize_t n, double* B, Py_ssize_t nrhs, Py_ssize_t* piv) noexcept nogil:
    """Solve Mx X = B in place (B is n x nrhs, row major); returns log|det Mx| (-inf if singular)."""
    cdef Py_ssize_t i, j, k, r, pr
    cdef double mxv, v, f, logdet = 0.0
    for k in range(n):
        pr = k
        mxv = Mx[k * n + k] if Mx[k * n + k] >= 0 else -Mx[k * n + k]
        for r in range(k + 1, n):
            v = Mx[r * n + k] if Mx[r * n + k] >= 0 else -Mx[r * n + k]
            if v > mxv:
                mxv = v
                pr = r
        if mxv == 0.0:
            return -INFINITY
        if pr != k:
            for j in range(n):
                v = Mx[k * n + j]
                Mx[k * n + j] = Mx[pr * n + j]
                Mx[pr * n + j] = v
            for j in range(nrhs):
                v = B[k * nrhs + j]
                B[k * nrhs + j] = B[pr * nrhs + j]
                B[pr * nrhs + j] = v
        logdet += log(mxv)
        for r in range(k + 1, n):
            f = Mx[r * n + k] / Mx[k * n + k]
            if f != 0.0:
                for j in range(k + 1, n):
                    Mx[r * n + j] -= f * Mx[k * n + j]
                for j in range(nrhs):
                    B[r * nrhs + j] -= f * B[k * nrhs + j]
    i = n - 1
    while i >= 0:
        for j in range(nrhs):
            v = B[i * nrhs + j]
            for k in range(i + 1, n):
                v -= Mx[i * n + k] * B[k * nrhs + j]
            B[i * nrhs + j] = v / Mx[i * n + i]
        i -= 1
    return logdet


cdef struct PotWork:
    double* h
    double* phi
    double* cA
    double* lam
    double* a
    double* Mx
    double* Minv
    double* XiM
    double* T1
    double* v
    double* w
    double* Xn
    double* mn
    Py_ssize_t* piv


cdef int _potential(double* Xi, double* mu, const double* A, const double* Qm, const double* c, double r,
                    const double* fu, double gu, double y, Py_ssize_t dz, PotWork* pw) noexcept nogil:
    """Covariance-form backward potential step, in place on (Xi, mu); 1 when r vanishes."""
    cdef Py_ssize_t i, j, l
    cdef double acc, rr, cfu
    for i in range(dz):
        acc = 0.0
        for j in range(dz):
            acc = acc + Qm[i * dz + j] * c[j]
        pw.h[i] = acc
    acc = 0.0
    for i in range(dz):
        acc = acc + c[i] * pw.h[i]
    rr = acc + r
    if not rr > 0.0:
        return 1
    cfu = 0.0
    for i in range(dz):
        cfu = cfu + c[i] * fu[i]
        pw.phi[i] = pw.h[i] / rr
    for j in range(dz):
        acc = 0.0
        for i in range(dz):
            acc = acc + c[i] * A[i * dz + j]
        pw.cA[j] = acc
    for i in range(dz):
        pw.a[i] = fu[i] - pw.phi[i] * cfu - pw.phi[i] * gu
        for j in range(dz):
            pw.lam[i * dz + j] = A[i * dz + j] - pw.phi[i] * pw.cA[j]
    # Mx = I + (Q - h h'/rr) Xi ; Minv = Mx^{-1}
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + (Qm[i * dz + l] - pw.h[i] * pw.h[l] / rr) * Xi[l * dz + j]
            pw.Mx[i * dz + j] = acc + (1.0 if i == j else 0.0)
            pw.Minv[i * dz + j] = 1.0 if i == j else 0.0
    _lu_solve(pw.Mx, dz, pw.Minv, dz, pw.piv)
    # XiM = Xi Minv ; Xn = lam' XiM lam + cA cA' / rr
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + Xi[i * dz + l] * pw.Minv[l * dz + j]
            pw.XiM[i * dz + j] = acc
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + pw.XiM[i * dz + l] * pw.lam[l * dz + j]
            pw.T1[i * dz + j] = acc
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + pw.lam[l * dz + i] * pw.T1[l * dz + j]
            pw.Xn[i * dz + j] = acc + pw.cA[i] * pw.cA[j] / rr
    # v = mu - Xi (a + phi y) ; mn = lam' Minv' v + cA (y - gu - c fu) / rr
    for i in range(dz):
        acc = 0.0
        for l in range(dz):
            acc = acc + Xi[i * dz + l] * (pw.a[l] + pw.phi[l] * y)
        pw.v[i] = mu[i] - acc
    for i in range(dz):
        acc = 0.0
        for l in range(dz):
            acc = acc + pw.Minv[l * dz + i] * pw.v[l]
        pw.w[i] = acc
    for i in range(dz):
        acc = 0.0
        for l in range(dz):
            acc = acc + pw.lam[l * dz + i] * pw.w[l]
        pw.mn[i] = acc + pw.cA[i] * (y - gu - cfu) / rr
    for i in range(dz):
        mu[i] = pw.mn[i]
        for j in range(dz):
            Xi[i * dz + j] = 0.5 * (pw.Xn[i * dz + j] + pw.Xn[j * dz + i])
    return 0


cdef class _PotWorkspace:
    cdef object arrays
    cdef PotWork pw

    def __cinit__(self, Py_ssize_t dz):
        cdef double[::1] h, phi, cA, a, v, w, mn, lam, Mx, Minv, XiM, T1, Xn
        cdef cnp.int64_t[::1] piv
        h, phi, cA, a, v, w, mn = (np.empty(dz) for _ in range(7))
        lam, Mx, Minv, XiM, T1, Xn = (np.empty(dz * dz) for _ in range(6))
        piv = np.empty(dz, dtype=np.int64)
        self.arrays = (h, phi, cA, a, v, w, mn, lam, Mx, Minv, XiM, T1, Xn, piv)
        self.pw.h, self.pw.phi, self.pw.cA, self.pw.a = &h[0], &phi[0], &cA[0], &a[0]
        self.pw.v, self.pw.w, self.pw.mn = &v[0], &w[0], &mn[0]
        self.pw.lam, self.pw.Mx, self.pw.Minv, self.pw.XiM = &lam[0], &Mx[0], &Minv[0], &XiM[0]
        self.pw.T1, self.pw.Xn, self.pw.piv = &T1[0], &Xn[0], <Py_ssize_t*>&piv[0]


def potential_step(Xi, mu, A, Q, c, double r, fu, double gu, double y):
    """Backward potential recursion for scalar observations, covariance form."""
    cdef double[:, ::1] Xv = np.array(Xi, dtype=float, order="C")
    cdef double[::1] mv = np.array(mu, dtype=float)
    cdef double[:, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=float)
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=float)
    cdef double[::1] fv = np.ascontiguousarray(fu, dtype=float)
    cdef Py_ssize_t dz = Av.shape[0]
    cdef _PotWorkspace ws = _PotWorkspace(dz)
    if _potential(&Xv[0, 0], &mv[0], &Av[0, 0], &Qv[0, 0], &cv[0], r, &fv[0], gu, y, dz, &ws.pw):
        raise ValueError("zero observation variance given the previous state (C B and D both vanish)")
    return np.asarray(Xv), np.asarray(mv)


cdef double _bl(const double* m, const double* S, const double* Xi, const double* mu, Py_ssize_t dz,
                double* Km, double* X, double* d, Py_ssize_t* piv) noexcept nogil:
    """log of the integral of exp(-(z'Xi z - 2 mu'z)/2) against N(m, S)."""
    cdef Py_ssize_t i, j, l
    cdef double acc, quad = 0.0, logdet
    for i in range(dz):
        for j in range(dz):
            acc = 0.0
            for l in range(dz):
                acc = acc + S[i * dz + l] * Xi[l * dz + j]
            Km[i * dz + j] = acc + (1.0 if i == j else 0.0)
            X[i * dz + j] = S[i * dz + j]
    logdet = _lu_solve(Km, dz, X, dz, piv)
    for i in range(dz):
        acc = 0.0
        for l in range(dz):
            acc = acc + Xi[i * dz + l] * m[l]
        d[i] = mu[i] - acc
        quad = quad + m[i] * acc - 2.0 * mu[i] * m[i]
    for i in range(dz):
        acc = 0.0
        for j in range(dz):
            acc = acc + X[i * dz + j] * d[j]
        quad = quad - d[i] * acc
    return -0.5 * quad - 0.5 * logdet


def backward_loglik_batch(means, covs, Xi, mu):
    """log of the integral of exp(-(z'Xi z - 2 mu'z)/2) against N(m_i, S_i), per row."""
    cdef double[:, ::1] mv = np.ascontiguousarray(means, dtype=float)
    cdef double[:, :, ::1] Sv = np.ascontiguousarray(covs, dtype=float)
    cdef double[:, ::1] Xv = np.ascontiguousarray(Xi, dtype=float)
    cdef double[::1] uv = np.ascontiguousarray(mu, dtype=float)
    cdef Py_ssize_t n = mv.shape[0], dz = mv.shape[1], i
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef double[::1] Km = np.empty(dz * dz)
    cdef double[::1] X = np.empty(dz * dz)
    cdef double[::1] d = np.empty(dz)
    cdef cnp.int64_t[::1] piv = np.empty(dz, dtype=np.int64)
    for i in range(n):
        ov[i] = _bl(&mv[i, 0], &Sv[i, 0, 0], &Xv[0, 0], &uv[0], dz, &Km[0], &X[0], &d[0], <Py_ssize_t*>&piv[0])
    return out


cdef Py_ssize_t _categorical(const double* lv, Py_ssize_t M, double u, double* cum) noexcept nogil:
    cdef Py_ssize_t i
    cdef double mx = -INFINITY, target
    for i in range(M):
        if lv[i] > mx:
            mx = lv[i]
    if not isfinite(mx):
        return -1
    cum[0] = exp(lv[0] - mx)
    for i in range(1, M):
        cum[i] = cum[i - 1] + exp(lv[i] - mx)
    target = u * cum[M - 1]
    for i in range(M):
        if cum[i] >= target:
            return i
    return M - 1


def backward(A, Q, C, R, fu, gu, y, int trans_kind, trans_param, sizes, states, parents, logw, means, covs, counts,
             uniforms, trans_fn=None):
    """Backward sampling of one discrete path through the stored supports."""
    if trans_fn is not None or trans_kind not in (MARKOV, POLYA):
        raise NotImplementedError("compiled kernel handles Markov and Polya transitions only")
    cdef double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, :, ::1] Qv = np.ascontiguousarray(Q, dtype=float)
    cdef double[:, ::1] cv = np.ascontiguousarray(np.asarray(C, dtype=float)[:, 0, :])
    cdef double[::1] rv = np.ascontiguousarray(np.asarray(R, dtype=float)[:, 0, 0])
    cdef double[:, :, ::1] fuv = np.ascontiguousarray(fu, dtype=float)
    cdef double[:, ::1] guv = np.ascontiguousarray(np.asarray(gu, dtype=float)[:, :, 0])
    cdef double[::1] yv = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(-1))
    cdef double[:, ::1] tp = np.ascontiguousarray(trans_param, dtype=float)
    cdef cnp.int64_t[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] stv = np.ascontiguousarray(states, dtype=np.int64)
    cdef double[:, ::1] lwv = np.ascontiguousarray(logw, dtype=float)
    cdef double[:, :, ::1] mv = np.ascontiguousarray(means, dtype=float)
    cdef double[:, :, :, ::1] Sv = np.ascontiguousarray(covs, dtype=float)
    cdef int[:, :, :, ::1] cnt = np.ascontiguousarray(counts, dtype=np.int32)
    cdef double[::1] uv = np.ascontiguousarray(uniforms, dtype=float)
    cdef Py_ssize_t T = sz.shape[0], K = Av.shape[0], dz = Av.shape[1], cap = stv.shape[1]
    cdef bint polya = trans_kind == POLYA
    path_a = np.empty(T, dtype=np.int64)
    cdef cnp.int64_t[::1] path = path_a
    cdef double[:, ::1] Xi = np.zeros((dz, dz))
    cdef double[::1] mu = np.zeros(dz)
    cdef double[:, ::1] d = np.zeros((K, K))
    cdef double[::1] lv = np.empty(cap)
    cdef double[::1] cum = np.empty(cap)
    cdef double[::1] Km = np.empty(dz * dz)
    cdef double[::1] X = np.empty(dz * dz)
    cdef double[::1] dv = np.empty(dz)
    cdef cnp.int64_t[::1] piv = np.empty(dz, dtype=np.int64)
    cdef double[::1] arow = np.zeros(K)
    cdef _PotWorkspace ws = _PotWorkspace(dz)
    cdef Py_ssize_t t, i, M, st, x1, a, b, idx
    cdef double acc, al, cc, dd, crow, drow
    for a in range(K):
        for b in range(K):
            arow[a] += tp[a, b]
    M = sz[T - 1]
    idx = _categorical(&lwv[T - 1, 0], M, uv[T - 1], &cum[0])
    if idx < 0:
        raise DegenerateFilterError("all backward weights are zero")
    path[T - 1] = stv[T - 1, idx]
    t = T - 2
    while t >= 0:
        x1 = path[t + 1]
        if _potential(&Xi[0, 0], &mu[0], &Av[x1, 0, 0], &Qv[x1, 0, 0], &cv[x1, 0], rv[x1], &fuv[t + 1, x1, 0],
                      guv[t + 1, x1], yv[t + 1], dz, &ws.pw):
            raise ValueError("zero observation variance given the previous state (C B and D both vanish)")
        M = sz[t]
        with nogil:
            for i in range(M):
                st = stv[t, i]
                acc = lwv[t, i]
                if polya:
                    if isfinite(acc):
                        for a in range(K):
                            crow = 0.0
                            drow = 0.0
                            for b in range(K):
                                al = tp[a, b]
                                cc = cnt[t, i, a, b]
                                dd = d[a, b] + (1.0 if (a == st and b == x1) else 0.0)
                                crow = crow + cc
                                drow = drow + dd
                                if dd != 0.0:
                                    acc = acc + lgamma(al + cc + dd) - lgamma(al + cc)
                            if drow != 0.0:
                                acc = acc - (lgamma(arow[a] + crow + drow) - lgamma(arow[a] + crow))
                else:
                    acc = acc + tp[st, x1]
                if isfinite(acc):
                    acc = acc + _bl(&mv[t, i, 0], &Sv[t, i, 0, 0], &Xi[0, 0], &mu[0], dz, &Km[0], &X[0], &dv[0],
                                    <Py_ssize_t*>&piv[0])
                lv[i] = acc
        idx = _categorical(&lv[0], M, uv[t], &cum[0])
        if idx < 0:
            raise DegenerateFilterError("all backward weights are zero")
        path[t] = stv[t, idx]
        d[path[t], x1] += 1.0
        t -= 1
    return path_a


# -- continuous-state simulation smoother ---------------------------------------


cdef double _ldl(const double* S, Py_ssize_t n, double* L, double* d, double scale) noexcept nogil:
    """LDL' with small pivots zeroed (same loop order as the numpy version); returns min relative pivot.

    ``scale`` <= 0 means the largest diagonal entry of S.
    """
    cdef Py_ssize_t i, j, k
    cdef double tol, dj, v, min_piv = INFINITY, a
    cdef bint own = scale <= 0
    if own:
        scale = 0.0
    for i in range(n):
        a = S[i * n + i] if S[i * n + i] >= 0 else -S[i * n + i]
        if own and a > scale:
            scale = a
        for j in range(n):
            L[i * n + j] = 1.0 if i == j else 0.0
        d[i] = 0.0
    if scale < 1e-300:
        scale = 1e-300
    tol = 1e-12 * scale
    for j in range(n):
        dj = S[j * n + j]
        for k in range(j):
            dj = dj - L[j * n + k] * L[j * n + k] * d[k]
        if dj / scale < min_piv:
            min_piv = dj / scale
        if dj <= tol:
            continue
        d[j] = dj
        for i in range(j + 1, n):
            v = S[i * n + j]
            for k in range(j):
                v = v - L[i * n + k] * L[j * n + k] * d[k]
            L[i * n + j] = v / dj
    return min_piv


cdef void _ldl_solve(const double* L, const double* d, Py_ssize_t n, double* u) noexcept nogil:
    cdef Py_ssize_t i, k
    for i in range(n):
        for k in range(i):
            u[i] = u[i] - L[i * n + k] * u[k]
    for i in range(n):
        u[i] = u[i] / d[i] if d[i] > 0 else 0.0
    i = n - 1
    while i >= 0:
        for k in range(i + 1, n):
            u[i] = u[i] - L[k * n + i] * u[k]
        i -= 1


def ffbs(A, Q, C, R, fu, gu, y, m0, P0, path, normals):
    """Draw z_{0:T} given a discrete path (scalar observations); returns (z, min_pivot)."""
    cdef double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=float)
    cdef double[:, :, ::1] Qv = np.ascontiguousarray(Q, dtype=float)
    cdef double[:, ::1] cv = np.ascontiguousarray(np.asarray(C, dtype=float)[:, 0, :])
    cdef double[::1] rv = np.ascontiguousarray(np.asarray(R, dtype=float)[:, 0, 0])
    cdef double[:, :, ::1] fuv = np.ascontiguousarray(fu, dtype=float)
    cdef double[:, ::1] guv = np.ascontiguousarray(np.asarray(gu, dtype=float)[:, :, 0])
    cdef double[::1] yv = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(-1))
    cdef cnp.int64_t[::1] pv = np.ascontiguousarray(path, dtype=np.int64)
    cdef double[:, ::1] nv = np.ascontiguousarray(normals, dtype=float)
    cdef Py_ssize_t T = yv.shape[0], dz = Av.shape[1], t, i, j, l, k
    ms_a = np.empty((T + 1, dz))
    Ps_a = np.empty((T + 1, dz, dz))
    z_a = np.empty((T + 1, dz))
    cdef double[:, ::1] ms = ms_a
    cdef double[:, :, ::1] Ps = Ps_a
    cdef double[:, ::1] z = z_a
    cdef double[::1] tmp = np.empty(dz * dz)
    cdef double[::1] h = np.empty(dz)
    cdef double[::1] L = np.empty(dz * dz)
    cdef double[::1] d = np.empty(dz)
    cdef double[::1] Pp = np.empty(dz * dz)
    cdef double[::1] AP = np.empty(dz * dz)
    cdef double[::1] Gt = np.empty(dz * dz)
    cdef double[::1] col = np.empty(dz)
    cdef double[::1] res = np.empty(dz)
    cdef double[::1] cov = np.empty(dz * dz)
    cdef double acc, mp, min_piv, a
    ms_a[0] = np.asarray(m0, dtype=float)
    Ps_a[0] = np.asarray(P0, dtype=float)
    with nogil:
        for t in range(T):
            k = pv[t]
            # a noise-free observation (zero innovation variance) carries no update
            _kalman(&Av[k, 0, 0], &Qv[k, 0, 0], &cv[k, 0], rv[k], &fuv[t, k, 0], guv[t, k], yv[t],
                    &ms[t, 0], &Ps[t, 0, 0], dz, &ms[t + 1, 0], &Ps[t + 1, 0, 0], &tmp[0], &h[0])
        min_piv = _ldl(&Ps[T, 0, 0], dz, &L[0], &d[0], 0.0)
        for i in range(dz):
            acc = 0.0
            for j in range(dz):
                acc = acc + L[i * dz + j] * (sqrt(d[j]) * nv[T, j])
            z[T, i] = ms[T, i] + acc
        t = T - 1
        while t >= 0:
            k = pv[t]
            # AP = A P ; Pp = A P A' + Q
            for i in range(dz):
                for j in range(dz):
                    acc = 0.0
                    for l in range(dz):
                        acc = acc + Av[k, i, l] * Ps[t, l, j]
                    AP[i * dz + j] = acc
            for i in range(dz):
                for j in range(dz):
                    acc = 0.0
                    for l in range(dz):
                        acc = acc + AP[i * dz + l] * Av[k, j, l]
                    Pp[i * dz + j] = acc + Qv[k, i, j]
            for i in range(dz):
                for j in range(i + 1, dz):
                    acc = 0.5 * (Pp[i * dz + j] + Pp[j * dz + i])
                    Pp[i * dz + j] = acc
                    Pp[j * dz + i] = acc
            _ldl(&Pp[0], dz, &L[0], &d[0], 0.0)
            for j in range(dz):
                for i in range(dz):
                    col[i] = AP[i * dz + j]
                _ldl_solve(&L[0], &d[0], dz, &col[0])
                for i in range(dz):
                    Gt[i * dz + j] = col[i]
            # residual z_{t+1} - A m - fu
            for i in range(dz):
                acc = 0.0
                for l in range(dz):
                    acc = acc + Av[k, i, l] * ms[t, l]
                res[i] = z[t + 1, i] - acc - fuv[t, k, i]
            for i in range(dz):
                for j in range(dz):
                    acc = 0.0
                    for l in range(dz):
                        acc = acc + AP[l * dz + i] * Gt[l * dz + j]
                    cov[i * dz + j] = Ps[t, i, j] - acc
            for i in range(dz):
                for j in range(i + 1, dz):
                    acc = 0.5 * (cov[i * dz + j] + cov[j * dz + i])
                    cov[i * dz + j] = acc
                    cov[j * dz + i] = acc
            for i in range(dz):
                acc = 0.0
                for l in range(dz):
                    acc = acc + Gt[l * dz + i] * res[l]
                h[i] = ms[t, i] + acc
            a = 0.0
            for i in range(dz):
                if Ps[t, i, i] > a:
                    a = Ps[t, i, i]
            mp = _ldl(&cov[0], dz, &L[0], &d[0], a if a > 1e-300 else 1e-300)
            if mp < min_piv:
                min_piv = mp
            for i in range(dz):
                acc = 0.0
                for j in range(dz):
                    acc = acc + L[i * dz + j] * (sqrt(d[j]) * nv[t, j])
                z[t, i] = h[i] + acc
            t -= 1
    return z_a, float(min_piv)
