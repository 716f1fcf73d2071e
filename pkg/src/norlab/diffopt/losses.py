"""Training losses (negative ELBO, batch mean) with analytic gradients.

Each loss returns the scalar value, or ``(value, grad)`` with ``grad`` laid
out like ``p.values`` when ``want_grad`` is set. Gradients are written out by
hand; ``grad_check`` is the contract that keeps them honest.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .._pykernels import log1mexp
from ..errors import DomainError, NumericalAbort
from ..inference import EncoderParams, Layer, apply_act, init_encoder, ub_prior_psi
from ..model import FLOOR_A, ModelParams
from .core import Q_CLAMP, ConstraintMap, FlatParams, softplus_inv

LOGIT_CLAMP = float(np.log((1.0 - Q_CLAMP) / Q_CLAMP))


def f_prime(a):
    """d/da log(1 - e^-a) = 1/expm1(a), zero below the activation floor."""
    with np.errstate(over="ignore", divide="ignore"):
        return np.where(a > FLOOR_A, 1.0 / np.expm1(np.maximum(a, FLOOR_A)), 0.0)


def log_sigmoid(v):
    return -np.logaddexp(0.0, -v)


# -- parameter layout ------------------------------------------------------------------

def build_params(method, D, K, cfg, rng=None, init_params: ModelParams = None, n_data=None,
                 encoder: EncoderParams = None) -> FlatParams:
    """Initial FlatParams for ``method``.

    Generative parameters are softplus/sigmoid constrained when learned; when
    ``cfg.learn_generative`` is false they are stored as-is (identity) from
    ``init_params`` and kept frozen by the trainer.
    """
    rng = np.random.default_rng(rng)
    segs = []
    if cfg.learn_generative:
        if init_params is None:
            lo, hi = cfg.theta_init_range
            theta = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(D, K)))
            theta0 = np.full(D, cfg.theta0_init)
            mu = np.full(K, cfg.mu_init)
        else:
            theta = np.maximum(init_params.theta, 1e-8)
            theta0 = np.maximum(init_params.theta0, 1e-8)
            mu = init_params.mu
        segs += [("theta_raw", theta, "softplus"), ("theta0_raw", theta0, "softplus"),
                 ("mu_raw", mu, "sigmoid")]
        start = ModelParams(theta, theta0, mu)
    else:
        if init_params is None:
            raise DomainError("fixed generative parameters must be supplied")
        start = init_params
        segs += [("theta_raw", init_params.theta, "identity"),
                 ("theta0_raw", init_params.theta0, "identity"),
                 ("mu_raw", init_params.mu, "sigmoid")]
    meta = {"method": method, "D": D, "K": K}
    if method in ("acp", "avi"):
        if encoder is None:
            # start both heads at the prior-level posterior of the initial model
            out_bias = softplus_inv(np.clip(ub_prior_psi(start), 1e-3, 1e3))
            if method == "avi":
                mu0 = init_params.mu if init_params is not None else np.full(K, cfg.mu_init)
                out_bias = np.log(mu0) - np.log1p(-mu0)
            encoder = init_encoder(D, D if method == "acp" else K, method, cfg.hidden,
                                   cfg.hidden_act, rng, out_bias=out_bias)
        for j, layer in enumerate(encoder.layers):
            segs += [(f"enc.{j}.w", layer.w, "identity"), (f"enc.{j}.b", layer.b, "identity")]
        meta["enc_acts"] = [layer.act for layer in encoder.layers]
    elif method == "svi":
        if n_data is None:
            raise DomainError("SVI needs the number of training rows")
        mu0 = init_params.mu if init_params is not None else np.full(K, cfg.mu_init)
        segs += [("svi.logits", np.tile(mu0, (n_data, 1)), "sigmoid"),
                 ("svi.lam", np.full((n_data, D, K), 1.0 / K), "softmax")]
    return FlatParams.build(segs, meta)


def model_params(p: FlatParams) -> ModelParams:
    mu = np.clip(p.value("mu_raw"), 1e-12, 1 - 1e-12)
    return ModelParams(theta=p.value("theta_raw"), theta0=p.value("theta0_raw"), mu=mu)


def encoder_params(p: FlatParams) -> EncoderParams:
    acts = p.meta["enc_acts"]
    return EncoderParams([Layer(p.raw(f"enc.{j}.w").copy(), p.raw(f"enc.{j}.b").copy(), act)
                          for j, act in enumerate(acts)])


def generative_names(p):
    return ["theta_raw", "theta0_raw", "mu_raw"]


def encoder_names(p):
    return [n for n in p.names() if n.startswith("enc.")]


def _mu_logit(p):
    # mu is always sigmoid-constrained, so its raw value is the prior log-odds
    return p.raw("mu_raw")


# -- encoder pass with cache -----------------------------------------------------------------

def _act_grad(act, pre, out):
    if act == "relu":
        return (pre > 0).astype(float)
    if act == "tanh":
        return 1.0 - out * out
    if act == "sigmoid":
        return out * (1.0 - out)
    if act == "softplus":
        return expit(pre)
    return np.ones_like(pre)


def _enc_forward(p, X):
    acts = p.meta["enc_acts"]
    H = X
    cache = []
    for j, act in enumerate(acts):
        pre = H @ p.raw(f"enc.{j}.w") + p.raw(f"enc.{j}.b")
        out = apply_act(act, pre)
        cache.append((H, pre, out))
        H = out
    return cache


def _enc_backward(p, cache, d_pre_last, grad):
    acts = p.meta["enc_acts"]
    d_pre = d_pre_last
    for j in range(len(acts) - 1, -1, -1):
        H, pre, out = cache[j]
        p.put(grad, f"enc.{j}.w", H.T @ d_pre)
        p.put(grad, f"enc.{j}.b", d_pre.sum(axis=0))
        if j > 0:
            Hp, prep, outp = cache[j - 1]
            d_pre = (d_pre @ p.raw(f"enc.{j}.w").T) * _act_grad(acts[j - 1], prep, outp)


# -- shared ELBO pieces ---------------------------------------------------------------------

def _relaxed_elbo(theta, theta0, m, X, lg, noise, tau, detach_positive, want_grad):
    """Per-row ELBO estimate from posterior logits ``lg`` with relaxed samples.

    Returns ``(elbo, grads)`` where grads (if requested) holds d elbo_sum
    w.r.t. theta, theta0, m (direct path) and per-row d elbo / d lg.
    """
    B, D = X.shape
    L = noise.shape[1]
    q = expit(lg)
    neg = 1.0 - X
    neg_theta = neg @ theta
    negative = -(neg @ theta0 + np.sum(neg_theta * q, axis=1))
    kl = np.sum(q * (lg - m) + log_sigmoid(-lg) - log_sigmoid(-m), axis=1)
    lc = np.clip(lg, -LOGIT_CLAMP, LOGIT_CLAMP)
    Z = expit((lc[:, None, :] + noise) / tau)
    A = theta0 + Z @ theta.T
    positive = np.einsum("bld,bd->b", log1mexp(A), X) / L
    elbo = positive + negative - kl
    if not want_grad:
        return elbo, None
    dq = -neg_theta - (lg - m)
    dlg = q * (1.0 - q) * dq
    dtheta = -(neg.T @ q)
    dtheta0 = -neg.sum(axis=0)
    if not detach_positive:
        FP = f_prime(A) * X[:, None, :] / L
        dZ = FP @ theta
        dlc = np.sum(dZ * Z * (1.0 - Z), axis=1) / tau
        dlg = dlg + np.where(np.abs(lg) < LOGIT_CLAMP, dlc, 0.0)
        dtheta = dtheta + np.einsum("bld,blk->dk", FP, Z)
        dtheta0 = dtheta0 + FP.sum(axis=(0, 1))
    grads = {"theta": dtheta, "theta0": dtheta0, "m": np.sum(q - expit(m), axis=0), "lg": dlg}
    return elbo, grads


def _check_finite(elbo):
    if not np.all(np.isfinite(elbo)):
        bad = int(np.nonzero(~np.isfinite(elbo))[0][0])
        raise NumericalAbort(f"non-finite ELBO at batch row {bad}", index=bad)


def _put_generative(p, grad, g, scale):
    p.put(grad, "theta_raw", scale * g["theta"])
    p.put(grad, "theta0_raw", scale * g["theta0"])
    # the raw value is logit(mu), so d/d raw = d/d m
    seg = p.layout["mu_raw"]
    grad[seg.start:seg.stop] += scale * g["m"]


def loss_acp(p: FlatParams, batch, cfg, noise, tau=None, want_grad=False):
    """Amortized conjugate posterior: psi from the encoder, q in conjugate form."""
    X = np.asarray(batch, dtype=float)
    B = X.shape[0]
    tau = cfg.tau0 if tau is None else tau
    theta, theta0, m = p.value("theta_raw"), p.value("theta0_raw"), _mu_logit(p)
    cache = _enc_forward(p, X)
    psi = cache[-1][2]
    W = np.where(X > 0.5, psi, -1.0)
    lg = W @ theta + m
    elbo, g = _relaxed_elbo(theta, theta0, m, X, lg, noise, tau,
                            getattr(cfg, "detach_positive", False), want_grad)
    _check_finite(elbo)
    loss = -float(np.mean(elbo))
    if not want_grad:
        return loss
    scale = -1.0 / B
    dlg = g["lg"]
    g["theta"] = g["theta"] + W.T @ dlg
    g["m"] = g["m"] + dlg.sum(axis=0)
    grad = p.zeros_like()
    _put_generative(p, grad, g, scale)
    dpsi = (dlg @ theta.T) * X
    pre = cache[-1][1]
    _enc_backward(p, cache, scale * dpsi * _act_grad(p.meta["enc_acts"][-1], pre, psi), grad)
    return loss, grad


def loss_avi(p: FlatParams, batch, cfg, noise, tau=None, want_grad=False):
    """Amortized variational inference: q straight from the encoder."""
    X = np.asarray(batch, dtype=float)
    B = X.shape[0]
    tau = cfg.tau0 if tau is None else tau
    theta, theta0, m = p.value("theta_raw"), p.value("theta0_raw"), _mu_logit(p)
    cache = _enc_forward(p, X)
    # the sigmoid head's pre-activation is the posterior logit
    lg = cache[-1][1]
    elbo, g = _relaxed_elbo(theta, theta0, m, X, lg, noise, tau,
                            getattr(cfg, "detach_positive", False), want_grad)
    _check_finite(elbo)
    loss = -float(np.mean(elbo))
    if not want_grad:
        return loss
    scale = -1.0 / B
    grad = p.zeros_like()
    _put_generative(p, grad, g, scale)
    _enc_backward(p, cache, scale * g["lg"], grad)
    return loss, grad


def loss_from_logits(p: FlatParams, X, lg, noise, tau):
    """Relaxed NELBO for externally supplied posterior logits (value only)."""
    theta, theta0, m = p.value("theta_raw"), p.value("theta0_raw"), _mu_logit(p)
    elbo, _ = _relaxed_elbo(theta, theta0, m, np.asarray(X, dtype=float), lg, noise, tau,
                            False, False)
    return -float(np.mean(elbo))


def loss_svi(p: FlatParams, batch, cfg=None, want_grad=False):
    """Deterministic NELBO upper bound using the analytic expected lower bound
    of the positive likelihoods. ``batch`` is ``(row_indices, X)``."""
    idx, X = batch
    idx = np.asarray(idx)
    X = np.asarray(X, dtype=float)
    B = X.shape[0]
    theta, theta0, m = p.value("theta_raw"), p.value("theta0_raw"), _mu_logit(p)
    if np.any(theta0[np.any(X > 0.5, axis=0)] <= 0):
        raise DomainError("lower bound needs a positive leak on every positive dimension")
    lg = p.raw("svi.logits")[idx]
    lam_raw = p.raw("svi.lam")[idx]
    lam = ConstraintMap.forward("softmax", lam_raw)
    q = expit(lg)
    neg = 1.0 - X
    neg_theta = neg @ theta
    f0 = log1mexp(theta0)
    Y = theta0[None, :, None] + theta[None, :, :] / lam
    FY = log1mexp(Y)
    Qb = q[:, None, :]
    inner = lam * (Qb * FY + (1.0 - Qb) * f0[None, :, None])
    positive = np.einsum("bdk,bd->b", inner, X)
    negative = -(neg @ theta0 + np.sum(neg_theta * q, axis=1))
    kl = np.sum(q * (lg - m) + log_sigmoid(-lg) - log_sigmoid(-m), axis=1)
    elbo = positive + negative - kl
    _check_finite(elbo)
    loss = -float(np.mean(elbo))
    if not want_grad:
        return loss
    scale = -1.0 / B
    Xb = X[:, :, None]
    FPY = f_prime(Y)
    dq = np.einsum("bdk,bd->bk", lam * (FY - f0[None, :, None]), X) - neg_theta - (lg - m)
    dlg = q * (1.0 - q) * dq
    dlam = Xb * (Qb * (FY - FPY * theta[None] / lam) + (1.0 - Qb) * f0[None, :, None])
    dtheta = np.einsum("bdk,bd->dk", Qb * FPY, X) - neg.T @ q
    fp0 = f_prime(theta0)
    dtheta0 = np.einsum("bdk,bd->d", lam * (Qb * FPY + (1.0 - Qb) * fp0[None, :, None]), X) \
        - neg.sum(axis=0)
    grad = p.zeros_like()
    _put_generative(p, grad, {"theta": dtheta, "theta0": dtheta0,
                              "m": np.sum(q - expit(m), axis=0)}, scale)
    seg = p.layout["svi.logits"]
    gl = grad[seg.start:seg.stop].reshape(seg.shape)
    np.add.at(gl, idx, scale * dlg)
    seg = p.layout["svi.lam"]
    gL = grad[seg.start:seg.stop].reshape(seg.shape)
    dlam_raw = lam * (dlam - np.sum(lam * dlam, axis=-1, keepdims=True))
    np.add.at(gL, idx, scale * dlam_raw)
    return loss, grad


def sample_noise(rng, B, L, K):
    """Differences g1 - g0 of standard Gumbel pairs, shape (B, L, K)."""
    G = rng.gumbel(size=(2, B, L, K))
    return G[0] - G[1]
