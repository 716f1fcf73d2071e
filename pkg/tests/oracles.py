"""Slow, independent reference implementations used only by the tests.

Everything here loops over explicit configurations with itertools and
plain math, sharing no code with the package.
"""
import itertools
import math

import numpy as np


def f(s):
    if s > 700:
        return -math.exp(-s)
    return math.log(1.0 - math.exp(-s)) if s > 0.5 else math.log(-math.expm1(-s))


def g(t):
    return -t * math.log(t) + (t + 1) * math.log(t + 1)


def configs(K):
    return [np.array(c, dtype=float) for c in itertools.product((0, 1), repeat=K)]


def log_prior(z, mu):
    return sum(math.log(m) if zk else math.log(1 - m) for zk, m in zip(z, mu))


def _logsumexp(vals):
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))


def _marginals(K, zs, logw):
    lz = _logsumexp(logw)
    marg = np.zeros(K)
    for z, lw in zip(zs, logw):
        marg += math.exp(lw - lz) * z
    return marg, lz


def true_joint(theta, theta0, mu, x):
    K = theta.shape[1]
    zs = configs(K)
    logw = []
    for z in zs:
        v = log_prior(z, mu)
        for i, xi in enumerate(x):
            a = theta0[i] + float(theta[i] @ z)
            if xi:
                v += f(max(a, 1e-6))
            else:
                v -= a
        logw.append(v)
    return zs, logw


def true_posterior(theta, theta0, mu, x):
    zs, logw = true_joint(theta, theta0, mu, x)
    return _marginals(theta.shape[1], zs, logw)


def ub_surrogate(theta, theta0, mu, x, psi):
    """Marginals and log normaliser of the joint with each positive
    likelihood replaced by exp(psi_i a_i - g(psi_i))."""
    K = theta.shape[1]
    zs = configs(K)
    logw = []
    for z in zs:
        v = log_prior(z, mu)
        for i, xi in enumerate(x):
            a = theta0[i] + float(theta[i] @ z)
            v += psi[i] * a - g(psi[i]) if xi else -a
        logw.append(v)
    return _marginals(K, zs, logw)


def lb_surrogate(theta, theta0, mu, x, lam):
    """Marginals of the joint with each positive likelihood replaced by
    exp(sum_k lam_ik f(theta0_i + theta_ik z_k / lam_ik))."""
    K = theta.shape[1]
    zs = configs(K)
    logw = []
    for z in zs:
        v = log_prior(z, mu)
        for i, xi in enumerate(x):
            if xi:
                for k in range(K):
                    if lam[i][k] > 0:
                        v += lam[i][k] * f(theta0[i] + theta[i, k] * z[k] / lam[i][k])
            else:
                v -= theta0[i] + float(theta[i] @ z)
        logw.append(v)
    return _marginals(K, zs, logw)


def q_prob(z, q):
    p = 1.0
    for zk, qk in zip(z, q):
        p *= qk if zk else 1 - qk
    return p


def expected_negative(theta, theta0, x, q):
    tot = 0.0
    for z in configs(theta.shape[1]):
        w = q_prob(z, q)
        for i, xi in enumerate(x):
            if not xi:
                tot -= w * (theta0[i] + float(theta[i] @ z))
    return tot


def kl(q, mu):
    tot = 0.0
    for z in configs(len(q)):
        w = q_prob(z, q)
        if w > 0:
            tot += w * (math.log(w) - log_prior(z, mu))
    return tot


def elbo(theta, theta0, mu, x, q):
    tot = 0.0
    for z in configs(theta.shape[1]):
        w = q_prob(z, q)
        if w == 0:
            continue
        v = log_prior(z, mu) - math.log(w)
        for i, xi in enumerate(x):
            a = theta0[i] + float(theta[i] @ z)
            v += f(max(a, 1e-6)) if xi else -a
        tot += w * v
    return tot


def forward_mlp(layers, x):
    """Straight-line forward pass over [(w, b, act)]."""
    acts = {
        "relu": lambda v: max(v, 0.0),
        "tanh": math.tanh,
        "sigmoid": lambda v: 1 / (1 + math.exp(-v)),
        "softplus": lambda v: math.log1p(math.exp(v)) if v < 30 else v,
        "identity": lambda v: v,
    }
    h = [float(v) for v in x]
    for w, b, act in layers:
        out = []
        for j in range(len(b)):
            s = b[j] + sum(h[i] * w[i][j] for i in range(len(h)))
            out.append(acts[act](s))
        h = out
    return np.array(h)


def expected_lb(theta_i, theta0_i, q, lam):
    return sum(lam[k] * (q[k] * f(theta0_i + theta_i[k] / lam[k]) + (1 - q[k]) * f(theta0_i))
               for k in range(len(q)) if lam[k] > 0)


def lb_multistart(theta_i, theta0_i, q, restarts=1000, seed=0):
    """Best expected lower bound over Dirichlet-random simplex points, plus
    five random starts polished by exponentiated-gradient ascent."""
    rng = np.random.default_rng(seed)
    K = len(q)
    best = -math.inf

    def val(lam):
        return expected_lb(theta_i, theta0_i, q, lam)

    def grad(lam):
        out = np.zeros(K)
        for k in range(K):
            y = theta0_i + theta_i[k] / lam[k]
            fp = 1.0 / math.expm1(y) if y < 700 else 0.0
            out[k] = q[k] * (f(y) - fp * theta_i[k] / lam[k]) + (1 - q[k]) * f(theta0_i)
        return out

    for _ in range(restarts):
        lam = rng.dirichlet(np.ones(K))
        lam = np.maximum(lam, 1e-12)
        lam /= lam.sum()
        best = max(best, val(lam))
    for _ in range(5):
        lam = rng.dirichlet(np.ones(K))
        step = 0.5
        cur = val(lam)
        for _ in range(3000):
            nl = lam * np.exp(step * grad(lam))
            nl /= nl.sum()
            nl = np.maximum(nl, 1e-200)
            nl /= nl.sum()
            nv = val(nl)
            if nv >= cur:
                lam, cur = nl, nv
                step = min(step * 1.2, 10.0)
            else:
                step *= 0.5
                if step < 1e-14:
                    break
        best = max(best, cur)
    return best
