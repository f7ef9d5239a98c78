"""Numpy implementation of the filtering kernels.

Mirrors the compiled ``_core`` module function for function; it is used when
the extension is unavailable and for models the extension does not cover
(vector observations, history-dependent transition callables).  Given the
same uniforms both backends make the same resampling decisions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

MARKOV, POLYA, GENERIC = 0, 1, 2
LOG_2PI = math.log(2.0 * math.pi)
_DET_FLOOR = 1e-300


class DegenerateFilterError(ArithmeticError):
    pass


# -- resampling ---------------------------------------------------------------


def solve_threshold(w, N):
    """Solve sum_i min(1, C w_i) = N.  Returns (C, L) with C = inf for keep-all."""
    w = np.asarray(w, dtype=float)
    M = w.size
    if M <= N:
        return math.inf, M
    npos = int(np.count_nonzero(w > 0))
    if npos == 0:
        raise DegenerateFilterError("all weights are zero")
    if npos <= N:
        return math.inf, npos
    ws = np.sort(w)[::-1]
    tail = np.cumsum(ws[::-1])[::-1]  # tail[k] = sum_{i >= k} ws[i]
    k = np.arange(N)
    ok = ws[:N] * (N - k) <= tail[:N]
    k0 = int(np.argmax(ok))
    C = (N - k0) / tail[k0]
    L = int(np.count_nonzero(w * C > 1.0))
    return float(C), L


def _cumulative(w):
    q = np.cumsum(np.asarray(w, dtype=np.longdouble))
    q = (q / q[-1]).astype(float)
    q[-1] = 1.0
    return q


def _grid_select(q, n, u1):
    """Indices i with Q(i-1) < U_j <= Q(i) for the grid U_j = u1 + (j-1)/n."""
    grid = np.asarray(u1, dtype=float)[..., None] + np.arange(n) / n
    idx = np.searchsorted(q, grid, side="left")
    return np.minimum(idx, q.size - 1)


def stratified_indices(w, n, u):
    """Stratified selection of ``n`` of the weighted items; u in (0, 1].

    ``u`` may be an array of replicate uniforms, giving one row per replicate.
    """
    q = _cumulative(w)
    return _grid_select(q, n, np.asarray(u, dtype=float) / n)


def conditional_stratified_indices(w, kappa, n, u):
    """Stratified selection forced to include item ``kappa``; u in (0, 1]."""
    if not w[kappa] > 0:
        raise ValueError(f"conditioned item {kappa} has zero weight")
    q = _cumulative(w)
    lo = q[kappa - 1] if kappa > 0 else 0.0
    hi = q[kappa]
    ustar = lo + np.asarray(u, dtype=float) * (hi - lo)
    u1 = ustar - np.floor(n * ustar) / n
    u1 = np.where(u1 <= 0.0, u1 + 1.0 / n, u1)
    out = _grid_select(q, n, u1)
    # the grid point at U* selects kappa; assign it explicitly in case the
    # interval of kappa is narrower than the float spacing of Q
    jstar = np.clip(np.rint((ustar - u1) * n).astype(np.int64), 0, n - 1)
    np.put_along_axis(out, jstar[..., None], kappa, axis=-1)
    return out


def optimal_resample(W, N, u, kappa=-1):
    """Threshold resampling of normalised weights ``W`` down to N survivors.

    Returns ``(survivors, log_factor, C, L)``: survivor indices in increasing
    order and log W / (1 ^ C W) for each of them.
    """
    W = np.asarray(W, dtype=float)
    M = W.size
    with np.errstate(divide="ignore"):
        logW = np.log(W)
    C, L = solve_threshold(W, N)
    if math.isinf(C):
        surv = np.arange(M) if M <= N else np.flatnonzero(W > 0)
        return surv, logW[surv], C, L
    maintained = W * C > 1.0
    resid = np.flatnonzero(~maintained)
    ns = N - L
    if kappa >= 0 and not maintained[kappa]:
        kr = int(np.searchsorted(resid, kappa))
        pick = conditional_stratified_indices(W[resid], kr, ns, u)
    else:
        pick = stratified_indices(W[resid], ns, u)
    chosen = np.zeros(M, dtype=bool)
    chosen[resid[pick]] = True
    surv = np.flatnonzero(maintained | chosen)
    lf = np.where(maintained[surv], logW[surv], -math.log(C))
    return surv, lf, C, L


# -- Kalman expansion ---------------------------------------------------------


def _expand(A, Q, C, R, fu_t, gu_t, y_t, m, P):
    """Filter every (parent, state) pair.  m: (S, dz), P: (S, dz, dz)."""
    mp = np.einsum("kij,sj->ski", A, m) + fu_t[None]
    Pp = np.einsum("kij,sjl,kml->skim", A, P, A) + Q[None]
    Pp = 0.5 * (Pp + np.swapaxes(Pp, -1, -2))
    dy = C.shape[1]
    if dy == 1:
        c = C[:, 0, :]  # (K, dz)
        ym = np.einsum("kj,skj->sk", c, mp) + gu_t[None, :, 0]
        h = np.einsum("skij,kj->ski", Pp, c)
        s = np.einsum("ki,ski->sk", c, h) + R[None, :, 0, 0]
        if np.any(~(s > _DET_FLOOR)):
            raise DegenerateFilterError("innovation variance is not positive")
        e = y_t[0] - ym
        # extreme residuals give -inf log weights, handled by the caller
        with np.errstate(over="ignore", invalid="ignore"):
            mf = mp + h * (e / s)[..., None]
            ll = -0.5 * (LOG_2PI + np.log(s) + e * e / s)
        Pf = Pp - h[..., :, None] * h[..., None, :] / s[..., None, None]
    else:
        ym = np.einsum("kij,skj->ski", C, mp) + gu_t[None]
        PCt = np.einsum("skij,kmj->skim", Pp, C)
        S = np.einsum("kij,skjm->skim", C, PCt) + R[None]
        L = np.linalg.cholesky(S)
        e = y_t[None, None, :] - ym
        a = np.linalg.solve(L, e[..., None])[..., 0]
        Kt = np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, np.swapaxes(PCt, -1, -2)))
        mf = mp + np.einsum("skji,skj->ski", Kt, e)
        Pf = Pp - PCt @ Kt
        ll = -0.5 * (dy * LOG_2PI + 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1) + (a * a).sum(-1))
    Pf = 0.5 * (Pf + np.swapaxes(Pf, -1, -2))
    return mf, Pf, ll


def _polya_logp(alpha, counts, parent_states):
    """log f(x | history) for every child, from per-particle transition counts."""
    a = alpha[parent_states] + counts[np.arange(parent_states.size), parent_states]
    return np.log(a) - np.log(a.sum(axis=1, keepdims=True))


def _capacity(N, K, T):
    caps = np.empty(T, dtype=np.int64)
    c = 1
    for t in range(T):
        c = min(c * K, N * K)
        caps[t] = c
    return caps


def forward(A, Q, C, R, fu, gu, y, m0, P0, log_nu, trans_kind, trans_param, N, uniforms, ref, store, trans_fn=None):
    """Discrete particle filter forward pass.

    ``ref`` is an empty array for the unconditional filter or the reference
    path for the conditional one.  Returns a dict of per-time arrays padded
    to the maximum support size.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    K, dz = A.shape[0], A.shape[1]
    caps = _capacity(N, K, T)
    cap = int(caps.max())
    conditional = len(ref) > 0
    sizes = np.zeros(T, dtype=np.int64)
    states = np.full((T, cap), -1, dtype=np.int64)
    parents = np.full((T, cap), -1, dtype=np.int64)
    lwbar = np.full((T, cap), -np.inf)
    logw = np.full((T, cap), -np.inf)
    log_incr = np.zeros(T)
    thresholds = np.full(T, np.nan)
    n_maint = np.zeros(T, dtype=np.int64)
    kappa = np.full(T, -1, dtype=np.int64)
    means = np.zeros((T, cap, dz)) if store else None
    covs = np.zeros((T, cap, dz, dz)) if store else None
    polya = trans_kind == POLYA
    counts_all = np.zeros((T, cap, K, K), dtype=np.int32) if (store and polya) else None

    m_cur = np.asarray(m0, dtype=float)[None]
    P_cur = np.asarray(P0, dtype=float)[None]
    cnt_cur = np.zeros((1, K, K), dtype=np.int32)
    paths_cur = [()]
    st_cur = np.zeros(1, dtype=np.int64)
    lfac = np.zeros(1)
    surv = np.zeros(1, dtype=np.int64)
    kref = 0

    for t in range(T):
        if t > 0:
            W = np.exp(logw[t - 1, : sizes[t - 1]])
            surv, lfac, Cth, L = optimal_resample(W, N, uniforms[t], kref if conditional else -1)
            thresholds[t - 1], n_maint[t - 1] = Cth, L
            m_cur, P_cur = m_cur[surv], P_cur[surv]
            st_cur = st_cur[surv]
            if polya:
                cnt_cur = cnt_cur[surv]
            if trans_kind == GENERIC:
                paths_cur = [paths_cur[i] for i in surv]
            if conditional:
                pos = np.searchsorted(surv, kref)
                if pos >= surv.size or surv[pos] != kref:
                    raise RuntimeError(f"reference path lost at time {t}")
                kref = int(pos)
        S = surv.size
        try:
            mf, Pf, ll = _expand(A, Q, C, R, fu[t], gu[t], y[t], m_cur, P_cur)
        except DegenerateFilterError as exc:
            raise DegenerateFilterError(f"{exc} at time {t + 1}") from None
        if t == 0:
            lt = np.broadcast_to(log_nu, (S, K))
        elif trans_kind == MARKOV:
            lt = trans_param[st_cur]
        elif polya:
            with np.errstate(divide="ignore"):
                lt = _polya_logp(trans_param, cnt_cur, st_cur)
        else:
            with np.errstate(divide="ignore"):
                lt = np.log(np.array([trans_fn(p) for p in paths_cur]))
        lw = (lt + ll + lfac[:, None]).ravel()
        M = S * K
        mx = lw.max()
        if not np.isfinite(mx):
            raise DegenerateFilterError(f"all particle weights are zero at time {t + 1}")
        lz = mx + math.log(np.exp(lw - mx).sum())
        sizes[t] = M
        new_states = np.tile(np.arange(K), S)
        new_parents = np.repeat(surv, K)
        states[t, :M] = new_states
        parents[t, :M] = new_parents
        lwbar[t, :M] = lw
        logw[t, :M] = lw - lz
        log_incr[t] = lz
        m_cur = mf.reshape(M, dz)
        P_cur = Pf.reshape(M, dz, dz)
        if polya:
            c = np.repeat(cnt_cur, K, axis=0)
            if t > 0:
                c[np.arange(M), np.repeat(st_cur, K), new_states] += 1
            cnt_cur = c
        if trans_kind == GENERIC:
            paths_cur = [p + (x,) for p in paths_cur for x in range(K)]
        st_cur = new_states
        if store:
            means[t, :M] = m_cur
            covs[t, :M] = P_cur
            if polya:
                counts_all[t, :M] = cnt_cur
        if conditional:
            kref = kref * K + int(ref[t])
            if not np.isfinite(lw[kref]):
                raise DegenerateFilterError(f"reference path has zero weight at time {t + 1}")
            kappa[t] = kref
    return dict(
        sizes=sizes, states=states, parents=parents, lwbar=lwbar, logw=logw, log_incr=log_incr,
        thresholds=thresholds, n_maint=n_maint, kappa=kappa, means=means, covs=covs, counts=counts_all,
    )


# -- backward sampling ----------------------------------------------------------


def potential_step(Xi, mu, A, Q, c, r, fu, gu, y):
    """Backward potential recursion for scalar observations, covariance form.

    ``c`` is the observation row, ``r`` the observation noise variance and
    ``gu`` the scalar input term.  Works with Gamma Gamma^T directly.
    """
    h = Q @ c
    rr = float(c @ h + r)
    if not rr > 0.0:
        raise ValueError("zero observation variance given the previous state (C B and D both vanish)")
    phi = h / rr
    cA = c @ A
    lam = A - np.outer(phi, cA)
    a = fu - phi * (c @ fu) - phi * gu
    Sg = Q - np.outer(h, h) / rr
    dz = A.shape[0]
    Minv = np.linalg.inv(np.eye(dz) + Sg @ Xi)
    XiM = Xi @ Minv
    Xi_new = lam.T @ XiM @ lam + np.outer(cA, cA) / rr
    v = mu - Xi @ (a + phi * y)
    mu_new = lam.T @ (Minv.T @ v) + cA * (y - gu - c @ fu) / rr
    return 0.5 * (Xi_new + Xi_new.T), mu_new


def backward_loglik_batch(means, covs, Xi, mu):
    """log of the integral of exp(-(z'Xi z - 2 mu'z)/2) against N(m_i, S_i), per row."""
    dz = means.shape[1]
    Kmat = np.eye(dz)[None] + covs @ Xi
    X = np.linalg.solve(Kmat, covs)
    d = mu[None] - means @ Xi
    quad = np.einsum("si,ij,sj->s", means, Xi, means) - 2.0 * means @ mu - np.einsum("si,sij,sj->s", d, X, d)
    _, logdet = np.linalg.slogdet(Kmat)
    return -0.5 * quad - 0.5 * logdet


def _categorical(lv, u):
    mx = lv.max()
    if not np.isfinite(mx):
        raise DegenerateFilterError("all backward weights are zero")
    cum = np.cumsum(np.exp(lv - mx))
    i = int(np.searchsorted(cum, u * cum[-1], side="left"))
    return min(i, lv.size - 1)


def _prefixes(states, parents, t, M):
    """Paths x_{1:t+1} of the first M particles stored at time index t."""
    out = np.empty((M, t + 1), dtype=np.int64)
    idx = np.arange(M)
    for s in range(t, -1, -1):
        out[:, s] = states[s, idx]
        idx = parents[s, idx]
    return out


def backward_logweights(trans_kind, trans_param, states, parents, logw, means, covs, counts, t, future, d, Xi, mu,
                        trans_fn=None):
    """Unnormalised log backward weights of the particles stored at time index t.

    ``future`` is x'_{t+2:T} (0-based ``path[t+1:]``) and ``d`` the transition
    counts within it (Polya mode only).
    """
    M = int(np.count_nonzero(states[t] >= 0))
    st = states[t, :M]
    x1 = int(future[0])
    lv = logw[t, :M].copy()
    with np.errstate(divide="ignore"):
        if trans_kind == MARKOV:
            lv += trans_param[st, x1]
        elif trans_kind == POLYA:
            alpha = trans_param
            arow = alpha.sum(axis=1)
            c = counts[t, :M].astype(float)
            dd = np.broadcast_to(d, c.shape).copy()
            dd[np.arange(M), st, x1] += 1.0
            lv += (gammaln(alpha + c + dd) - gammaln(alpha + c)).sum(axis=(1, 2))
            cr = c.sum(axis=2)
            lv -= (gammaln(arow + cr + dd.sum(axis=2)) - gammaln(arow + cr)).sum(axis=1)
        else:
            pre = _prefixes(states, parents, t, M)
            for i in range(M):
                h = tuple(int(v) for v in pre[i])
                acc = 0.0
                for x in future:
                    p = trans_fn(h)[x]
                    acc += math.log(p) if p > 0 else -math.inf
                    h = h + (int(x),)
                lv[i] += acc
    live = np.isfinite(lv)
    if np.any(live):
        lv[live] += backward_loglik_batch(means[t, :M][live], covs[t, :M][live], Xi, mu)
    return lv


def backward(A, Q, C, R, fu, gu, y, trans_kind, trans_param, sizes, states, parents, logw, means, covs, counts,
             uniforms, trans_fn=None):
    """Backward sampling of one discrete path through the stored supports."""
    y = np.asarray(y, dtype=float).reshape(len(sizes), -1)[:, 0]
    T = len(sizes)
    K, dz = A.shape[0], A.shape[1]
    path = np.empty(T, dtype=np.int64)
    M = sizes[T - 1]
    path[T - 1] = states[T - 1, _categorical(logw[T - 1, :M], uniforms[T - 1])]
    Xi = np.zeros((dz, dz))
    mu = np.zeros(dz)
    d = np.zeros((K, K))
    for t in range(T - 2, -1, -1):
        x1 = path[t + 1]
        Xi, mu = potential_step(Xi, mu, A[x1], Q[x1], C[x1, 0], R[x1, 0, 0], fu[t + 1, x1], gu[t + 1, x1, 0], y[t + 1])
        lv = backward_logweights(trans_kind, trans_param, states, parents, logw, means, covs, counts, t,
                                 path[t + 1:], d, Xi, mu, trans_fn)
        path[t] = states[t, _categorical(lv, uniforms[t])]
        d[path[t], x1] += 1.0
    return path


# -- continuous-state simulation smoother ---------------------------------------


def ldl_psd(S, rel_tol=1e-12, scale=None):
    """LDL' factorisation of a symmetric PSD matrix with small pivots set to zero.

    Returns ``(L, d, min_pivot)``; ``min_pivot`` is the smallest raw pivot
    relative to ``scale`` (default: the largest diagonal entry), for
    clamping diagnostics.
    """
    n = S.shape[0]
    L = np.eye(n)
    d = np.zeros(n)
    if scale is None:
        scale = float(np.max(np.abs(np.diag(S)))) if n else 0.0
    scale = max(scale, 1e-300)
    tol = rel_tol * scale
    min_piv = math.inf
    for j in range(n):
        dj = S[j, j]
        for k in range(j):
            dj -= L[j, k] * L[j, k] * d[k]
        min_piv = min(min_piv, dj / scale)
        if dj <= tol:
            continue
        d[j] = dj
        for i in range(j + 1, n):
            v = S[i, j]
            for k in range(j):
                v -= L[i, k] * L[j, k] * d[k]
            L[i, j] = v / dj
    return L, d, min_piv


def ldl_solve(L, d, b):
    """x = S^- b for the generalised inverse defined by the LDL' factors."""
    n = d.size
    u = np.array(b, dtype=float)
    for i in range(n):
        for k in range(i):
            u[i] -= L[i, k] * u[k]
    for i in range(n):
        u[i] = u[i] / d[i] if d[i] > 0 else 0.0
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            u[i] -= L[k, i] * u[k]
    return u


def ffbs(A, Q, C, R, fu, gu, y, m0, P0, path, normals):
    """Draw z_{0:T} given a discrete path: forward filter, backward simulation.

    ``normals`` holds (T+1, dz) standard normal draws.  Returns ``(z,
    min_pivot)`` with the smallest relative pivot met in the factorisations.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T = y.shape[0]
    dz = A.shape[1]
    ms = np.empty((T + 1, dz))
    Ps = np.empty((T + 1, dz, dz))
    ms[0], Ps[0] = m0, P0
    for t in range(T):
        k = path[t]
        mp = A[k] @ ms[t] + fu[t, k]
        Pp = A[k] @ Ps[t] @ A[k].T + Q[k]
        Pp = 0.5 * (Pp + Pp.T)
        PCt = Pp @ C[k].T
        S = C[k] @ PCt + R[k]
        if S.shape == (1, 1) and not S[0, 0] > _DET_FLOOR:
            # a noise-free observation (zero innovation variance) carries no update
            ms[t + 1], Ps[t + 1] = mp, Pp
            continue
        Kt = np.linalg.solve(S, PCt.T)
        ms[t + 1] = mp + Kt.T @ (y[t] - C[k] @ mp - gu[t, k])
        Pf = Pp - PCt @ Kt
        Ps[t + 1] = 0.5 * (Pf + Pf.T)
    z = np.empty((T + 1, dz))
    L, d, min_piv = ldl_psd(Ps[T])
    z[T] = ms[T] + L @ (np.sqrt(d) * normals[T])
    for t in range(T - 1, -1, -1):
        k = path[t]
        Ak = A[k]
        m, P = ms[t], Ps[t]
        Pp = Ak @ P @ Ak.T + Q[k]
        Pp = 0.5 * (Pp + Pp.T)
        Lp, dp, _ = ldl_psd(Pp)
        APt = Ak @ P  # rows: A P; G' = Pp^- A P
        Gt = np.column_stack([ldl_solve(Lp, dp, APt[:, j]) for j in range(dz)])
        mean = m + Gt.T @ (z[t + 1] - Ak @ m - fu[t, k])
        cov = P - APt.T @ Gt
        cov = 0.5 * (cov + cov.T)
        Lc, dc, mc = ldl_psd(cov, scale=float(np.max(np.abs(np.diag(P)))))
        z[t] = mean + Lc @ (np.sqrt(dc) * normals[t])
        min_piv = min(min_piv, mc)
    return z, min_piv
