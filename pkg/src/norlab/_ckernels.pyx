# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``.

Same signatures, same algorithms; the loops run per datum (or per
configuration) in C instead of vectorising across rows.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, expm1, fmax, fmin, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double FLOOR_A = 1e-6
cdef double LN2 = 0.6931471805599453
cdef double LOG_PSI_LO = log(1e-8)
cdef double LOG_PSI_HI = log(1e6)
cdef int BISECT_ITERS = 60
cdef double ARMIJO_C = 1e-4
cdef double ARMIJO_SHRINK = 0.5
cdef int ARMIJO_MAX = 50
cdef double CURV_MIN = 1e-3
cdef double CURV_MAX = 1e12


cdef inline double c_log1mexp(double a) nogil:
    if a < FLOOR_A:
        a = FLOOR_A
    if a < LN2:
        return log(-expm1(-a))
    return log1p(-exp(-a))


def enum_posterior(const double[:, ::1] theta, const double[::1] theta0, const double[::1] log_mu,
                   const double[::1] log1m_mu, const double[::1] x, bint want_table):
    cdef Py_ssize_t D = theta.shape[0], K = theta.shape[1]
    cdef Py_ssize_t n = (<Py_ssize_t>1) << K
    cdef Py_ssize_t c, g, prev, i, k, j, P = 0
    cdef double base = 0.0, lw, m, s
    cdef double[::1] logits = np.empty(K)
    cdef double[::1] th_neg = np.zeros(K)
    cdef double[::1] logw = np.empty(n)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pos_idx = np.nonzero(np.asarray(x) > 0.5)[0].astype(np.int64)
    P = pos_idx.shape[0]
    cdef double[::1] act = np.empty(P)
    cdef double lin

    for k in range(K):
        logits[k] = log_mu[k] - log1m_mu[k]
        base += log1m_mu[k]
    for i in range(D):
        if x[i] <= 0.5:
            base -= theta0[i]
            for k in range(K):
                th_neg[k] += theta[i, k]
    for j in range(P):
        act[j] = theta0[pos_idx[j]]

    # Gray-code walk: each step flips one latent and updates activations in O(P)
    lin = 0.0
    m = -INFINITY
    with nogil:
        prev = 0
        for c in range(n):
            g = c ^ (c >> 1)
            if c > 0:
                k = 0
                while not ((g ^ prev) >> k) & 1:
                    k += 1
                if (g >> k) & 1:
                    lin += logits[k] - th_neg[k]
                    for j in range(P):
                        act[j] += theta[pos_idx[j], k]
                else:
                    lin -= logits[k] - th_neg[k]
                    for j in range(P):
                        act[j] -= theta[pos_idx[j], k]
            prev = g
            lw = base + lin
            for j in range(P):
                lw += c_log1mexp(act[j])
            logw[g] = lw
            if lw > m:
                m = lw

    cdef double[::1] marg = np.zeros(K)
    cdef double[::1] table = np.empty(n)
    s = 0.0
    for c in range(n):
        table[c] = exp(logw[c] - m)
        s += table[c]
    for c in range(n):
        table[c] /= s
        for k in range(K):
            if (c >> k) & 1:
                marg[k] += table[c]
    return m + log(s), np.asarray(marg), (np.asarray(table) if want_table else None)


def enum_expected_positive(const double[:, ::1] theta_pos, const double[::1] theta0_pos,
                           const double[::1] q):
    cdef Py_ssize_t P = theta_pos.shape[0], K = theta_pos.shape[1]
    cdef Py_ssize_t n = (<Py_ssize_t>1) << K
    cdef Py_ssize_t c, k, j
    cdef double total = 0.0, w, a, inner
    if P == 0:
        return 0.0
    with nogil:
        for c in range(n):
            w = 1.0
            for k in range(K):
                if (c >> k) & 1:
                    w *= q[k]
                else:
                    w *= 1.0 - q[k]
            if w == 0.0:
                continue
            inner = 0.0
            for j in range(P):
                a = theta0_pos[j]
                for k in range(K):
                    if (c >> k) & 1:
                        a += theta_pos[j, k]
                inner += c_log1mexp(a)
            total += w * inner
    return total


cdef double ub_root(const double* b, const double* th, double th0, Py_ssize_t K) nogil:
    cdef double lo = LOG_PSI_LO, hi = LOG_PSI_HI, mid, psi, d
    cdef int it
    cdef Py_ssize_t k
    for it in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        psi = exp(mid)
        d = th0 - log1p(1.0 / psi)
        for k in range(K):
            d += th[k] / (1.0 + exp(-(b[k] + psi * th[k])))
        if d > 0:
            hi = mid
        else:
            lo = mid
    return exp(0.5 * (lo + hi))


def ub_prior_psi(const double[:, ::1] theta, const double[::1] theta0, const double[::1] logit_mu):
    cdef Py_ssize_t D = theta.shape[0], K = theta.shape[1], i
    cdef double[::1] out = np.empty(D)
    with nogil:
        for i in range(D):
            out[i] = ub_root(&logit_mu[0], &theta[i, 0], theta0[i], K)
    return np.asarray(out)


def ub_sweep(const double[:, ::1] theta, const double[::1] theta0, const double[::1] logit_mu,
             const double[:, ::1] X, double[:, ::1] psi):
    cdef Py_ssize_t N = X.shape[0], D = X.shape[1], K = theta.shape[1]
    cdef Py_ssize_t n, i, k
    cdef double w, new
    cdef double* L = <double*> malloc(K * sizeof(double))
    cdef double* b = <double*> malloc(K * sizeof(double))
    try:
        with nogil:
            for n in range(N):
                for k in range(K):
                    L[k] = logit_mu[k]
                for i in range(D):
                    w = psi[n, i] if X[n, i] > 0.5 else -1.0
                    for k in range(K):
                        L[k] += w * theta[i, k]
                for i in range(D):
                    if X[n, i] <= 0.5:
                        continue
                    for k in range(K):
                        b[k] = L[k] - psi[n, i] * theta[i, k]
                    new = ub_root(b, &theta[i, 0], theta0[i], K)
                    psi[n, i] = new
                    for k in range(K):
                        L[k] = b[k] + new * theta[i, k]
    finally:
        free(L)
        free(b)
    return np.asarray(psi)


cdef void project_simplex_weighted(double* v, double* w, double* out, Py_ssize_t* order,
                                   Py_ssize_t K) nogil:
    # argmin sum_k (l_k - v_k)^2 / w_k on the simplex: l_k = max(0, v_k - tau w_k)
    cdef Py_ssize_t a, b, tmp, k
    cdef double cv = 0.0, cw = 0.0, tau, t = 0.0
    for k in range(K):
        order[k] = k
    # insertion sort of breakpoints v/w, descending; stable like numpy's
    for a in range(1, K):
        tmp = order[a]
        b = a - 1
        while b >= 0 and v[order[b]] / w[order[b]] < v[tmp] / w[tmp]:
            order[b + 1] = order[b]
            b -= 1
        order[b + 1] = tmp
    for a in range(K):
        k = order[a]
        cv += v[k]
        cw += w[k]
        tau = (cv - 1.0) / cw
        if v[k] / w[k] > tau:
            t = tau
    for k in range(K):
        out[k] = fmax(v[k] - t * w[k], 0.0)


cdef double lb_value_grad(const double* lam, const double* th, double th0, const double* q, double f0,
                          double* grad, double* curv, Py_ssize_t K) nogil:
    cdef double val = 0.0, y, fy, fpy, persp, dpersp
    cdef Py_ssize_t k
    for k in range(K):
        fpy = 0.0
        if th[k] <= 0:
            persp = lam[k] * f0
            dpersp = f0
        elif lam[k] > 0:
            y = th0 + th[k] / lam[k]
            fy = c_log1mexp(y)
            fpy = 1.0 / expm1(y)
            persp = lam[k] * fy
            dpersp = fy - fpy * th[k] / lam[k]
        else:
            persp = 0.0
            dpersp = 0.0
        val += q[k] * persp + (1.0 - q[k]) * lam[k] * f0
        if grad != NULL:
            grad[k] = q[k] * dpersp + (1.0 - q[k]) * f0
            if th[k] > 0 and lam[k] > 0:
                curv[k] = q[k] * fpy * (1.0 + fpy) * th[k] * th[k] / (lam[k] * lam[k] * lam[k])
            else:
                curv[k] = 0.0
    return val


def lb_tighten(const double[:, ::1] theta_rows, const double[::1] theta0_rows, const double[:, ::1] q_rows,
               double[:, ::1] lam, double tol, int max_iter):
    cdef Py_ssize_t M = lam.shape[0], K = lam.shape[1], r, k
    cdef int it, bt, n_iter = 0
    cdef double f0, val, cv, step, lin
    cdef bint accepted
    cdef double[:, ::1] trace = np.empty((max_iter + 1, M))
    cdef double* grad = <double*> malloc(K * sizeof(double))
    cdef double* curv = <double*> malloc(K * sizeof(double))
    cdef double* wt = <double*> malloc(K * sizeof(double))
    cdef double* trial = <double*> malloc(K * sizeof(double))
    cdef double* cand = <double*> malloc(K * sizeof(double))
    cdef Py_ssize_t* order = <Py_ssize_t*> malloc(K * sizeof(Py_ssize_t))
    try:
        with nogil:
            for r in range(M):
                f0 = c_log1mexp(theta0_rows[r])
                val = lb_value_grad(&lam[r, 0], &theta_rows[r, 0], theta0_rows[r], &q_rows[r, 0],
                                    f0, grad, curv, K)
                trace[0, r] = val
                it = 0
                while it < max_iter:
                    it += 1
                    for k in range(K):
                        wt[k] = 1.0 / fmin(fmax(curv[k], CURV_MIN), CURV_MAX)
                    step = 1.0
                    accepted = False
                    for bt in range(ARMIJO_MAX):
                        for k in range(K):
                            trial[k] = lam[r, k] + step * wt[k] * grad[k]
                        project_simplex_weighted(trial, wt, cand, order, K)
                        cv = lb_value_grad(cand, &theta_rows[r, 0], theta0_rows[r], &q_rows[r, 0],
                                           f0, NULL, NULL, K)
                        lin = 0.0
                        for k in range(K):
                            lin += grad[k] * (cand[k] - lam[r, k])
                        if cv >= val + ARMIJO_C * lin:
                            accepted = True
                            break
                        step *= ARMIJO_SHRINK
                    if accepted and cv >= val:
                        for k in range(K):
                            lam[r, k] = cand[k]
                        if cv - val <= tol:
                            val = cv
                            trace[it, r] = val
                            break
                        val = cv
                        trace[it, r] = val
                    else:
                        trace[it, r] = val
                        break
                    val = lb_value_grad(&lam[r, 0], &theta_rows[r, 0], theta0_rows[r], &q_rows[r, 0],
                                        f0, grad, curv, K)
                # rows that finished early carry their final value forward
                for bt in range(it + 1, max_iter + 1):
                    trace[bt, r] = val
                if it > n_iter:
                    n_iter = it
    finally:
        free(grad)
        free(curv)
        free(wt)
        free(trial)
        free(cand)
        free(order)
    return np.asarray(trace)[: n_iter + 1].copy(), n_iter
