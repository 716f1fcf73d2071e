"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
The numpy versions vectorise across data points (or across configurations)
instead of looping, so they are usable on their own, just slower for the
per-datum solvers.
"""
import numpy as np

FLOOR_A = 1e-6
LN2 = 0.6931471805599453

LOG_PSI_LO = np.log(1e-8)
LOG_PSI_HI = np.log(1e6)
BISECT_ITERS = 60
ENUM_CHUNK = 1 << 15

ARMIJO_C = 1e-4
ARMIJO_SHRINK = 0.5
ARMIJO_MAX = 50
CURV_MIN = 1e-3
CURV_MAX = 1e12


def log1mexp(a):
    """log(1 - exp(-a)) with the activation clamped at FLOOR_A."""
    a = np.maximum(np.asarray(a, dtype=float), FLOOR_A)
    small = a < LN2
    out = np.log1p(-np.exp(-np.where(small, LN2, a)))
    return np.where(small, np.log(-np.expm1(-np.where(small, a, LN2))), out)


def _config_block(start, stop, K):
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(K, dtype=np.int64)) & 1).astype(float)


def enum_posterior(theta, theta0, log_mu, log1m_mu, x, want_table):
    """Exact posterior of the true noisy-OR model by enumerating z in {0,1}^K.

    Returns ``(log_marginal, marginals, table)``; ``table`` is None unless
    requested. Configuration index c encodes z_k = (c >> k) & 1.
    """
    D, K = theta.shape
    pos = x > 0.5
    n = 1 << K
    logits = log_mu - log1m_mu
    base = float(np.sum(log1m_mu)) - float(np.sum(theta0[~pos]))
    th_neg = theta[~pos].sum(axis=0)
    th_pos = theta[pos]
    th0_pos = theta0[pos]

    chunks = []
    for start in range(0, n, ENUM_CHUNK):
        Z = _config_block(start, min(n, start + ENUM_CHUNK), K)
        lw = base + Z @ (logits - th_neg)
        if th_pos.shape[0]:
            A = th0_pos[None, :] + Z @ th_pos.T
            lw = lw + log1mexp(A).sum(axis=1)
        chunks.append(lw)
    logw = np.concatenate(chunks)
    m = logw.max()
    w = np.exp(logw - m)
    s = w.sum()
    log_marginal = m + np.log(s)
    p = w / s
    marg = np.empty(K)
    idx = np.arange(n, dtype=np.int64)
    for k in range(K):
        marg[k] = p[((idx >> k) & 1) == 1].sum()
    return log_marginal, marg, (p if want_table else None)


def enum_expected_positive(theta_pos, theta0_pos, q):
    """Sum over configurations of q(z) * sum_i log(1 - exp(-a_i(z)))."""
    P, K = theta_pos.shape
    if P == 0:
        return 0.0
    total = 0.0
    n = 1 << K
    for start in range(0, n, ENUM_CHUNK):
        Z = _config_block(start, min(n, start + ENUM_CHUNK), K)
        w = np.prod(np.where(Z > 0.5, q[None, :], 1.0 - q[None, :]), axis=1)
        A = theta0_pos[None, :] + Z @ theta_pos.T
        total += float(w @ log1mexp(A).sum(axis=1))
    return total


def _ub_root(b, th, th0):
    """Vectorised bisection in log(psi) for
    th0 - log1p(1/psi) + sum_k th_k * sigmoid(b_k + psi * th_k) = 0.

    ``b`` and ``th`` are (M, K), ``th0`` is (M,). The derivative is increasing
    in psi, so the root is unique; values are clipped to the bracket.
    """
    lo = np.full(th0.shape, LOG_PSI_LO)
    hi = np.full(th0.shape, LOG_PSI_HI)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        psi = np.exp(mid)
        s = b + psi[:, None] * th
        d = th0 - np.log1p(1.0 / psi) + np.sum(th / (1.0 + np.exp(-s)), axis=1)
        up = d > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    return np.exp(0.5 * (lo + hi))


def ub_prior_psi(theta, theta0, logit_mu):
    """Per-dimension minimiser of E_{p(z)}[exp(psi*a_i - g(psi))]."""
    D, K = theta.shape
    b = np.broadcast_to(logit_mu, (D, K))
    return _ub_root(b, theta, theta0)


def ub_sweep(theta, theta0, logit_mu, X, psi):
    """One Gauss-Seidel sweep of exact coordinate minimisation of the
    surrogate log marginal, for every row of X at once. ``psi`` (N, D) is
    updated in place; entries at negative dimensions are left untouched.
    """
    N, D = X.shape
    pos = X > 0.5
    # current posterior logits
    W = np.where(pos, psi, -1.0)
    L = logit_mu[None, :] + W @ theta
    for i in range(D):
        rows = np.nonzero(pos[:, i])[0]
        if rows.size == 0:
            continue
        th = theta[i]
        b = L[rows] - psi[rows, i][:, None] * th[None, :]
        new = _ub_root(b, np.broadcast_to(th, b.shape), np.full(rows.size, theta0[i]))
        psi[rows, i] = new
        L[rows] = b + new[:, None] * th[None, :]
    return psi


def _project_simplex_weighted(V, W):
    """Row-wise argmin sum_k (l_k - v_k)^2 / w_k over the probability simplex.

    The solution is l_k = max(0, v_k - tau * w_k); tau is found from the
    sorted breakpoints v_k / w_k. With W = 1 this is the Euclidean projection.
    """
    M, K = V.shape
    order = np.argsort(-(V / W), axis=1, kind="stable")
    Vs = np.take_along_axis(V, order, axis=1)
    Ws = np.take_along_axis(W, order, axis=1)
    tau = (np.cumsum(Vs, axis=1) - 1.0) / np.cumsum(Ws, axis=1)
    valid = Vs / Ws > tau
    j = K - 1 - np.argmax(valid[:, ::-1], axis=1)
    t = tau[np.arange(M), j]
    return np.maximum(V - t[:, None] * W, 0.0)


def _lb_value_grad(lam, th, th0, q, f0):
    # objective sum_k lam_k [q_k f(th0 + th_k/lam_k) + (1-q_k) f(th0)]
    active = (lam > 0) & (th > 0)
    safe = np.where(active, lam, 1.0)
    y = th0[:, None] + th / safe
    fy = np.where(active, log1mexp(y), 0.0)
    with np.errstate(over="ignore"):
        fpy = np.where(active, 1.0 / np.expm1(y), 0.0)
    zero_w = th <= 0
    # where th_k = 0 the perspective is lam * f(th0)
    persp = np.where(zero_w, lam * f0[:, None], lam * fy)
    dpersp = np.where(zero_w, f0[:, None], fy - fpy * th / safe)
    val = np.sum(q * persp + (1.0 - q) * lam * f0[:, None], axis=1)
    grad = q * dpersp + (1.0 - q) * f0[:, None]
    # curvature magnitude of each term, used as a diagonal metric
    curv = np.where(active, q * fpy * (1.0 + fpy) * th * th / safe ** 3, 0.0)
    return val, grad, curv


def lb_tighten(theta_rows, theta0_rows, q_rows, lam, tol, max_iter):
    """Diagonally scaled projected gradient ascent on the simplex with Armijo
    backtracking (initial step 1, shrink 0.5, at most 50 backtracks).

    Each of the M rows is an independent (datum, positive dimension) problem:
    ``theta_rows`` (M, K), ``theta0_rows`` (M,), ``q_rows`` (M, K); ``lam``
    (M, K) is updated in place. Returns ``(trace, n_iter)`` where ``trace[t]``
    is the per-row objective after t iterations, shape (n_iter + 1, M).
    """
    M, K = lam.shape
    f0 = log1mexp(theta0_rows)
    val, grad, curv = _lb_value_grad(lam, theta_rows, theta0_rows, q_rows, f0)
    trace = [val.copy()]
    done = np.zeros(M, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        W = 1.0 / np.clip(curv, CURV_MIN, CURV_MAX)
        step = np.ones(M)
        new_lam = lam.copy()
        new_val = val.copy()
        pending = ~done
        accepted = np.zeros(M, dtype=bool)
        for _ in range(ARMIJO_MAX):
            if not pending.any():
                break
            rows = np.nonzero(pending)[0]
            cand = _project_simplex_weighted(
                lam[rows] + step[rows, None] * W[rows] * grad[rows], W[rows])
            cv = _lb_value_grad(cand, theta_rows[rows], theta0_rows[rows], q_rows[rows], f0[rows])[0]
            ok = cv >= val[rows] + ARMIJO_C * np.sum(grad[rows] * (cand - lam[rows]), axis=1)
            good = rows[ok]
            new_lam[good] = cand[ok]
            new_val[good] = cv[ok]
            accepted[good] = True
            pending[good] = False
            step[rows[~ok]] *= ARMIJO_SHRINK
        gain = np.where(accepted, new_val - val, 0.0)
        improved = accepted & (new_val >= val)
        lam[improved] = new_lam[improved]
        val = np.where(improved, new_val, val)
        done |= ~accepted | (gain <= tol)
        trace.append(val.copy())
        if done.all():
            break
        _, grad, curv = _lb_value_grad(lam, theta_rows, theta0_rows, q_rows, f0)
    return np.array(trace), it
