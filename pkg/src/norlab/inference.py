"""Posterior construction: conjugate posterior, amortized encoders, SVI state
and the conjugate-dual fixed-point solvers for both bounds.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.special import expit, logit

from ._pykernels import log1mexp
from .errors import ContractError, ConvergenceWarning, DomainError
from .kernels import get_backend
from .model import (BoundState, ModelParams, _check_q, _check_x, check_simplex, conjugate_g,
                    elbo_terms_batch, exact_posterior, K_ENUM_MAX)

PSI_MIN = 1e-8
PSI_MAX = 1e6

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softplus", "identity")


def softplus(v):
    return np.logaddexp(0.0, v)


def apply_act(name, v):
    if name == "relu":
        return np.maximum(v, 0.0)
    if name == "tanh":
        return np.tanh(v)
    if name == "sigmoid":
        return expit(v)
    if name == "softplus":
        return softplus(v)
    if name == "identity":
        return v
    raise ContractError(f"unknown activation {name!r}")


# -- encoders --------------------------------------------------------------------

@dataclass
class Layer:
    w: np.ndarray  # (n_in, n_out)
    b: np.ndarray  # (n_out,)
    act: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ContractError(f"layer weight {self.w.shape} and bias {self.b.shape} do not match")
        if self.act not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.act!r}")


@dataclass
class EncoderParams:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("encoder needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.w.shape[1] != b.w.shape[0]:
                raise ContractError("consecutive layer widths do not chain")

    @property
    def n_in(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1].w.shape[1]

    @property
    def final_act(self) -> str:
        return self.layers[-1].act

    def forward(self, X) -> np.ndarray:
        H = np.asarray(X, dtype=float)
        if H.shape[-1] != self.n_in:
            raise ContractError(f"encoder expects width {self.n_in}, got {H.shape[-1]}")
        for layer in self.layers:
            H = apply_act(layer.act, H @ layer.w + layer.b)
        return H

    def to_dict(self) -> dict:
        return {"layers": [{"w": layer.w.tolist(), "b": layer.b.tolist(), "act": layer.act}
                           for layer in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict()) + "\n"

    @classmethod
    def from_dict(cls, d) -> "EncoderParams":
        try:
            return cls([Layer(np.array(l["w"], dtype=float).reshape(len(l["w"]), -1), l["b"], l["act"])
                        for l in d["layers"]])
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed encoder document: {exc}") from None

    @classmethod
    def from_json(cls, text) -> "EncoderParams":
        return cls.from_dict(json.loads(text))

    def copy(self) -> "EncoderParams":
        return EncoderParams([Layer(l.w.copy(), l.b.copy(), l.act) for l in self.layers])


def init_encoder(n_in, n_out, kind, hidden=None, hidden_act="relu", rng=None, out_bias=0.0):
    """Glorot-uniform MLP. ``kind`` is "acp" (softplus head) or "avi" (sigmoid head).

    ``hidden`` is a list of widths; the default is one layer of 2*max(n_in, n_out).
    """
    rng = np.random.default_rng(rng)
    final = {"acp": "softplus", "avi": "sigmoid"}[kind]
    if hidden is None:
        hidden = [2 * max(n_in, n_out)]
    widths = [n_in, *hidden, n_out]
    layers = []
    for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        lim = np.sqrt(6.0 / (a + b))
        w = rng.uniform(-lim, lim, size=(a, b))
        last = j == len(widths) - 2
        bias = np.broadcast_to(np.asarray(out_bias, dtype=float), (b,)).copy() if last else np.zeros(b)
        layers.append(Layer(w, bias, final if last else hidden_act))
    return EncoderParams(layers)


def encode_acp(enc: EncoderParams, x) -> np.ndarray:
    """psi for every observed dimension (only positive ones are used)."""
    psi = enc.forward(x)
    # softplus can underflow to 0 for very negative pre-activations
    return np.maximum(psi, PSI_MIN)


def encode_avi(enc: EncoderParams, x) -> np.ndarray:
    q = enc.forward(x)
    return np.clip(q, 1e-12, 1.0 - 1e-12)


# -- conjugate (upper-bound) posterior ---------------------------------------------

def _full_psi(x, psi, D):
    """Accept psi either over all D dims or over the positive dims only."""
    psi = np.asarray(psi, dtype=float)
    pos = x > 0.5
    if psi.shape == (D,):
        full = psi
    elif psi.shape == (int(pos.sum()),):
        full = np.zeros(D)
        full[pos] = psi
    else:
        raise ContractError(f"psi must have length D={D} or one entry per positive dim")
    if np.any(~(full[pos] > 0)):
        raise DomainError("psi must be positive on every positive dimension")
    return full


def posterior_logits(params: ModelParams, x, psi) -> np.ndarray:
    x = _check_x(x, params.D)
    psi = _full_psi(x, psi, params.D)
    w = np.where(x > 0.5, psi, -1.0)
    return w @ params.theta + params.logit_mu


def conjugate_posterior(params: ModelParams, x, psi) -> np.ndarray:
    """q_k = sigmoid(sum_pos psi_i theta_ik - sum_neg theta_ik + logit mu_k)."""
    return expit(posterior_logits(params, x, psi))


def conjugate_posterior_batch(params: ModelParams, X, Psi) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    W = np.where(X > 0.5, Psi, -1.0)
    return expit(W @ params.theta + params.logit_mu)


def ub_marginal_loglik_batch(params: ModelParams, X, Psi) -> np.ndarray:
    """log Z of the surrogate joint for every row; Psi is (N, D)."""
    X = np.asarray(X, dtype=float)
    pos = X > 0.5
    Psi_pos = np.where(pos, Psi, 1.0)
    gpsi = np.log1p(Psi_pos) + Psi_pos * np.log1p(1.0 / Psi_pos)
    lead = np.sum(np.where(pos, Psi_pos * params.theta0 - gpsi, -params.theta0), axis=1)
    C = np.where(pos, Psi, -1.0) @ params.theta
    # log(mu e^c + 1 - mu) = logaddexp(log mu + c, log(1 - mu))
    tail = np.logaddexp(np.log(params.mu) + C, np.log1p(-params.mu)).sum(axis=1)
    return lead + tail


def ub_marginal_loglik(params: ModelParams, x, psi) -> float:
    x = _check_x(x, params.D)
    full = _full_psi(x, psi, params.D)
    return float(ub_marginal_loglik_batch(params, x[None, :], full[None, :])[0])


def _ub_prior_objective(params: ModelParams, dims, psi):
    # log E_{p(z)}[exp(psi a_i - g(psi))] per dimension in ``dims``
    th = params.theta[dims]
    lm, l1m = np.log(params.mu), np.log1p(-params.mu)
    g = conjugate_g(psi)
    inner = np.logaddexp(lm[None, :] + psi[:, None] * th, l1m[None, :]).sum(axis=1)
    return psi * params.theta0[dims] - g + inner


def _ub_prior_deriv(params: ModelParams, dims, psi):
    th = params.theta[dims]
    s = params.logit_mu[None, :] + psi[:, None] * th
    return params.theta0[dims] - np.log1p(1.0 / psi) + np.sum(th * expit(s), axis=1)


def cdi_fixed_point_ub(params: ModelParams, x, tol=1e-10, max_iter=200):
    """Tightest upper bound in expectation under the prior, per positive dim.

    Bisection in log(psi) on the derivative of the (convex) expected bound,
    over [PSI_MIN, PSI_MAX]. Returns ``(BoundState, trace)``; ``trace[t]`` is
    the summed objective at the best iterate after t steps.
    """
    x = _check_x(x, params.D)
    dims = np.nonzero(x > 0.5)[0]
    if dims.size == 0:
        raise ContractError("upper-bound CDI needs at least one positive dimension")
    lo = np.full(dims.size, np.log(PSI_MIN))
    hi = np.full(dims.size, np.log(PSI_MAX))
    best_psi = np.exp(0.5 * (lo + hi))
    best = _ub_prior_objective(params, dims, best_psi)
    trace = [best.sum()]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        psi = np.exp(mid)
        d = _ub_prior_deriv(params, dims, psi)
        up = d > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
        val = _ub_prior_objective(params, dims, psi)
        better = val < best
        best = np.where(better, val, best)
        best_psi = np.where(better, psi, best_psi)
        trace.append(best.sum())
        if np.all(hi - lo <= tol):
            converged = True
            break
    if not converged:
        warnings.warn(f"upper-bound bisection stopped after {max_iter} steps", ConvergenceWarning)
    state = BoundState("upper", dims, psi=best_psi, converged=converged, n_iter=it,
                       trace=np.array(trace))
    return state, np.array(trace)


def ub_prior_psi(params: ModelParams, backend=None) -> np.ndarray:
    """Per-dimension solution of the prior-expectation problem for all D dims."""
    kb = get_backend(backend)
    return np.asarray(kb.ub_prior_psi(params.theta, params.theta0,
                                      np.ascontiguousarray(params.logit_mu)))


@dataclass
class UBTrace:
    psi: np.ndarray          # (N, D) final parameters
    q: np.ndarray            # (N, K) final posterior
    ll_ub: np.ndarray        # (n_iter + 1,) mean surrogate log marginal
    elbo: np.ndarray         # (n_iter + 1,) mean ELBO of the induced posterior


def cdi_ub_sweeps(params: ModelParams, X, n_sweeps=20, elbo_fn=None, backend=None) -> UBTrace:
    """Tighten psi on each datum by exact coordinate minimisation of the
    surrogate log marginal, starting from the prior-expectation solution.

    Iteration 0 is the prior solution; every later iteration is one full
    sweep over the positive dims. ``elbo_fn(q)`` returns per-row ELBOs of the
    induced posterior; defaults to enumeration when K is small enough.
    """
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    kb = get_backend(backend)
    if elbo_fn is None:
        elbo_fn = _default_elbo_fn(params, X, backend)
    psi = np.ascontiguousarray(np.tile(ub_prior_psi(params, backend), (X.shape[0], 1)))
    lmu = np.ascontiguousarray(params.logit_mu)
    ll, el = [], []
    q = conjugate_posterior_batch(params, X, psi)
    for t in range(n_sweeps + 1):
        if t > 0:
            kb.ub_sweep(params.theta, params.theta0, lmu, X, psi)
            q = conjugate_posterior_batch(params, X, psi)
        ll.append(float(ub_marginal_loglik_batch(params, X, psi).mean()))
        el.append(float(np.mean(elbo_fn(q))))
    return UBTrace(psi=psi, q=q, ll_ub=np.array(ll), elbo=np.array(el))


def _default_elbo_fn(params, X, backend):
    if params.K <= K_ENUM_MAX:
        return lambda Q: elbo_exact_batch(params, X, Q, backend)
    from .model import elbo_mc_batch
    return lambda Q: elbo_mc_batch(params, X, Q, 100, 0)[0]


def elbo_exact_batch(params: ModelParams, X, Q, backend=None) -> np.ndarray:
    kb = get_backend(backend)
    X = np.asarray(X, dtype=float)
    negative, kl = elbo_terms_batch(params, X, Q)
    out = negative - kl
    for n in range(X.shape[0]):
        pos = X[n] > 0.5
        if pos.any():
            out[n] += kb.enum_expected_positive(
                np.ascontiguousarray(params.theta[pos]), np.ascontiguousarray(params.theta0[pos]),
                np.ascontiguousarray(Q[n]))
    return out


# -- lower bound ----------------------------------------------------------------------

def _lb_dims(params, x):
    dims = np.nonzero(x > 0.5)[0]
    if np.any(params.theta0[dims] <= 0):
        raise DomainError("lower bound needs a positive leak on every positive dimension")
    return dims


def lb_expected(params: ModelParams, x, q, lam) -> np.ndarray:
    """Per positive dim: sum_k lam_k [q_k f(th0 + th_k/lam_k) + (1 - q_k) f(th0)]."""
    x = _check_x(x, params.D)
    dims = _lb_dims(params, x)
    from ._pykernels import _lb_value_grad
    th0 = params.theta0[dims]
    lam = np.asarray(lam, dtype=float).reshape(dims.size, params.K)
    Qr = np.broadcast_to(np.asarray(q, dtype=float), lam.shape)
    return _lb_value_grad(lam, params.theta[dims], th0, Qr, log1mexp(th0))[0]


def cdi_fixed_point_lb(params: ModelParams, x, q, tol=1e-10, max_iter=500, lam0=None,
                       backend=None):
    """Maximise the expected lower bound over each positive dim's simplex.

    Diagonally scaled projected gradient ascent with Armijo backtracking.
    Returns ``(BoundState, trace)`` with ``trace[t]`` the summed objective.
    """
    x = _check_x(x, params.D)
    q = _check_q(q, params.K)
    dims = _lb_dims(params, x)
    K = params.K
    if lam0 is None:
        lam = np.full((dims.size, K), 1.0 / K)
    else:
        lam = np.array(lam0, dtype=float).reshape(dims.size, K)
        check_simplex(lam)
    lam = np.ascontiguousarray(lam)
    if dims.size == 0:
        return BoundState("lower", dims, lam=lam.reshape(0, K), trace=np.zeros(1)), np.zeros(1)
    kb = get_backend(backend)
    Qr = np.ascontiguousarray(np.tile(q, (dims.size, 1)))
    tr, n_iter = kb.lb_tighten(np.ascontiguousarray(params.theta[dims]),
                               np.ascontiguousarray(params.theta0[dims]), Qr, lam, tol, max_iter)
    trace = np.asarray(tr).sum(axis=1)
    gains = np.diff(np.asarray(tr), axis=0)
    converged = n_iter < max_iter or bool(np.all(gains[-1] <= tol))
    if not converged:
        warnings.warn(f"lower-bound tightening stopped after {max_iter} iterations",
                      ConvergenceWarning)
    state = BoundState("lower", dims, lam=lam, converged=converged, n_iter=n_iter, trace=trace)
    return state, trace


def lb_gain_rows(th, th0, lam) -> np.ndarray:
    """Per row: lam_k [f(th0 + th_k/lam_k) - f(th0)], 0 where lam_k or th_k is 0."""
    th0 = np.asarray(th0, dtype=float)[:, None]
    lam = np.asarray(lam, dtype=float)
    safe = np.where(lam > 0, lam, 1.0)
    gain = lam * (log1mexp(th0 + th / safe) - log1mexp(th0))
    return np.where((lam > 0) & (th > 0), gain, 0.0)


def lb_gain(params: ModelParams, dims, lam) -> np.ndarray:
    return lb_gain_rows(params.theta[dims], params.theta0[dims], lam)


def lb_surrogate_posterior(params: ModelParams, x, lam) -> np.ndarray:
    """Exact posterior of the lower-bound surrogate joint (factorised)."""
    x = _check_x(x, params.D)
    if isinstance(lam, BoundState):
        if lam.kind != "lower":
            raise ContractError("lb_surrogate_posterior needs a lower BoundState")
        dims, lam = lam.dims, lam.lam
    else:
        dims = np.nonzero(x > 0.5)[0]
        lam = np.asarray(lam, dtype=float)
    dims = np.asarray(dims)
    if not np.array_equal(dims, np.nonzero(x > 0.5)[0]):
        raise ContractError("bound state dimensions do not match the positive dims of x")
    if np.any(params.theta0[dims] <= 0):
        raise DomainError("lower bound needs a positive leak on every positive dimension")
    check_simplex(lam)
    neg = x < 0.5
    c = lb_gain(params, dims, lam).sum(axis=0) - params.theta[neg].sum(axis=0)
    return expit(c + params.logit_mu)


def lb_elbo(params: ModelParams, x, q, lam) -> float:
    """Lower bound of the ELBO: analytic expected LB plus negative and KL terms."""
    from .model import expected_negative_term, kl_to_prior
    pos = float(np.sum(lb_expected(params, x, q, lam))) if np.any(np.asarray(x) > 0.5) else 0.0
    return pos + expected_negative_term(params, x, q) - kl_to_prior(q, params.mu)


@dataclass
class LBResult:
    q: np.ndarray       # (N, K) or (K,) for a single datum
    lam: np.ndarray     # (N, D, K) responsibilities (rows at negative dims unused)
    trace: np.ndarray   # mean ELBO lower bound after each outer step
    converged: bool


def lb_elbo_batch(params: ModelParams, X, Q, Lam) -> np.ndarray:
    """Per-row lower bound of the ELBO; ``Lam`` is (N, D, K)."""
    from ._pykernels import _lb_value_grad
    X = np.asarray(X, dtype=float)
    negative, kl = elbo_terms_batch(params, X, Q)
    rows, dims = np.nonzero(X > 0.5)
    out = negative - kl
    if rows.size:
        th0 = params.theta0[dims]
        val = _lb_value_grad(Lam[rows, dims], params.theta[dims], th0, Q[rows], log1mexp(th0))[0]
        out += np.bincount(rows, weights=val, minlength=X.shape[0])
    return out


def lb_alternate_batch(params: ModelParams, X, n_outer=50, tol=1e-9, inner_tol=1e-12,
                       inner_iter=200, backend=None) -> LBResult:
    """Block coordinate ascent on the ELBO lower bound for every row of X.

    Each outer step tightens lambda for the current q (all (datum, positive
    dim) problems at once), then sets q to the lower-bound surrogate
    posterior, which is the exact maximiser for fixed lambda. Starts from
    q = mu and uniform lambda. Both steps never decrease the objective.
    """
    X = np.asarray(X, dtype=float)
    N, D = X.shape
    K = params.K
    rows, dims = np.nonzero(X > 0.5)
    if np.any(params.theta0[dims] <= 0):
        raise DomainError("lower bound needs a positive leak on every positive dimension")
    kb = get_backend(backend)
    Q = np.tile(params.mu, (N, 1))
    Lam = np.full((N, D, K), 1.0 / K)
    th_rows = np.ascontiguousarray(params.theta[dims])
    th0_rows = np.ascontiguousarray(params.theta0[dims])
    neg_c = -(1.0 - X) @ params.theta + params.logit_mu
    trace = [float(lb_elbo_batch(params, X, Q, Lam).mean())]
    converged = False
    for _ in range(n_outer):
        if rows.size:
            lam = np.ascontiguousarray(Lam[rows, dims])
            kb.lb_tighten(th_rows, th0_rows, np.ascontiguousarray(Q[rows]), lam, inner_tol, inner_iter)
            Lam[rows, dims] = lam
            gain = lb_gain_rows(th_rows, th0_rows, lam)
            C = np.zeros((N, K))
            np.add.at(C, rows, gain)
        else:
            C = np.zeros((N, K))
        Q = expit(C + neg_c)
        trace.append(float(lb_elbo_batch(params, X, Q, Lam).mean()))
        if abs(trace[-1] - trace[-2]) <= tol:
            converged = True
            break
    return LBResult(q=Q, lam=Lam, trace=np.array(trace), converged=converged)


def cdi_lb_alternate(params: ModelParams, x, **kw) -> LBResult:
    """Single-datum version of ``lb_alternate_batch``."""
    x = _check_x(x, params.D)
    res = lb_alternate_batch(params, x[None, :], **kw)
    return LBResult(q=res.q[0], lam=res.lam[0], trace=res.trace, converged=res.converged)


# -- SVI --------------------------------------------------------------------------------

@dataclass
class SviState:
    """Free per-datum posterior logits (N, K) and lower-bound responsibilities
    stored as unconstrained softmax logits (N, D, K)."""

    logits: np.ndarray
    lam_logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.lam_logits = np.asarray(self.lam_logits, dtype=float)
        if self.logits.ndim != 2 or self.lam_logits.ndim != 3:
            raise ContractError("SviState needs (N, K) logits and (N, D, K) responsibilities")
        if self.lam_logits.shape[0] != self.logits.shape[0] or \
                self.lam_logits.shape[2] != self.logits.shape[1]:
            raise ContractError("SviState shapes do not agree")
        if not np.all(np.isfinite(self.logits)):
            raise ContractError("SviState logits must be finite")

    @property
    def N(self) -> int:
        return self.logits.shape[0]

    @classmethod
    def init(cls, N, D, K, mu=None):
        base = np.zeros(K) if mu is None else logit(np.asarray(mu, dtype=float))
        return cls(np.tile(base, (N, 1)), np.zeros((N, D, K)))

    def lam(self, n) -> np.ndarray:
        L = self.lam_logits[n]
        e = np.exp(L - L.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def bound_state(self, n, x) -> BoundState:
        dims = np.nonzero(np.asarray(x) > 0.5)[0]
        return BoundState("lower", dims, lam=self.lam(n)[dims])


def svi_posterior(state: SviState, n: int) -> np.ndarray:
    if not 0 <= n < state.N:
        raise IndexError(f"datum index {n} out of range for N={state.N}")
    return expit(state.logits[n])


def exact_posterior_batch(params: ModelParams, X, backend=None) -> np.ndarray:
    """Exact posterior marginals for every row (enumeration)."""
    X = np.asarray(X, dtype=float)
    return np.array([exact_posterior(params, x, backend).marginals for x in X])
