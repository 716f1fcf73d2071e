"""Noisy-OR generative model, conjugate bounds and ELBO terms.

Conventions: ``theta`` is (D, K), ``theta0`` is (D,), ``mu`` is (K,). The
activation of observed dimension i is ``a_i = theta0_i + theta_i . z`` and
``p(x_i = 0 | z) = exp(-a_i)``. Everything is in nats.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit, logit

from .errors import CapacityError, ContractError, DomainError
from ._pykernels import log1mexp
from .kernels import get_backend

FLOOR_A = 1e-6
K_ENUM_MAX = 20


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray
    theta0: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=float)
        theta0 = np.ascontiguousarray(self.theta0, dtype=float)
        mu = np.ascontiguousarray(self.mu, dtype=float)
        if theta.ndim != 2:
            raise ContractError(f"theta must be 2-D, got shape {theta.shape}")
        D, K = theta.shape
        if theta0.shape != (D,) or mu.shape != (K,):
            raise ContractError(
                f"shape mismatch: theta {theta.shape}, theta0 {theta0.shape}, mu {mu.shape}"
            )
        for name, arr in (("theta", theta), ("theta0", theta0), ("mu", mu)):
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} has non-finite entries")
        if np.any(theta < 0) or np.any(theta0 < 0):
            raise ContractError("theta and theta0 must be non-negative")
        if np.any(mu <= 0) or np.any(mu >= 1):
            raise ContractError("mu must lie strictly inside (0, 1)")
        for arr in (theta, theta0, mu):
            arr.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "mu", mu)

    @property
    def D(self) -> int:
        return self.theta.shape[0]

    @property
    def K(self) -> int:
        return self.theta.shape[1]

    @property
    def logit_mu(self) -> np.ndarray:
        return logit(self.mu)

    def to_dict(self) -> dict:
        return {
            "D": self.D,
            "K": self.K,
            "theta0": [float(v) for v in self.theta0],
            "theta": [[float(v) for v in row] for row in self.theta],
            "mu": [float(v) for v in self.mu],
        }

    def to_json(self) -> str:
        # repr of a Python float round-trips exactly (shortest repr, <= 17 digits)
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        try:
            p = cls(theta=np.array(d["theta"], dtype=float).reshape(int(d["D"]), int(d["K"])),
                    theta0=d["theta0"], mu=d["mu"])
        except KeyError as exc:
            raise ContractError(f"missing field {exc.args[0]!r} in params document") from None
        return p

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


@dataclass
class BinaryDataset:
    x: np.ndarray
    z_true: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.uint8)
        if self.x.ndim != 2:
            raise ContractError("x must be an N x D matrix")
        if np.any(self.x > 1):
            raise ContractError("x entries must be 0 or 1")
        if self.z_true is not None:
            self.z_true = np.asarray(self.z_true, dtype=np.uint8)
            if self.z_true.ndim != 2 or self.z_true.shape[0] != self.x.shape[0]:
                raise ContractError("z_true must have one row per observation")

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def D(self) -> int:
        return self.x.shape[1]

    def check_against(self, params: ModelParams):
        if self.D != params.D:
            raise ContractError(f"dataset width {self.D} != model D {params.D}")
        if self.z_true is not None and self.z_true.shape[1] != params.K:
            raise ContractError(f"latent width {self.z_true.shape[1]} != model K {params.K}")


@dataclass
class BoundState:
    """Variational parameters of the conjugate bounds for one observation.

    ``dims`` lists the positive dimensions. For ``kind="upper"`` ``psi`` holds
    one value per entry of ``dims``; for ``kind="lower"`` ``lam`` is
    (len(dims), K) with rows on the simplex.
    """

    kind: str
    dims: np.ndarray
    psi: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    converged: bool = True
    n_iter: int = 0
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.int64)
        if self.kind == "upper":
            self.psi = np.asarray(self.psi, dtype=float)
            if self.psi.shape != self.dims.shape or np.any(self.psi <= 0):
                raise ContractError("upper bound state needs psi > 0 per positive dim")
        elif self.kind == "lower":
            self.lam = np.asarray(self.lam, dtype=float)
            check_simplex(self.lam)
            if self.lam.shape[0] != self.dims.shape[0]:
                raise ContractError("lower bound state needs one lambda row per positive dim")
        else:
            raise ContractError(f"unknown bound kind {self.kind!r}")


class ExactPosterior(NamedTuple):
    marginals: np.ndarray
    table: np.ndarray
    log_marginal: float


def check_simplex(lam, atol=1e-9):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or not np.allclose(lam.sum(axis=-1), 1.0, rtol=0, atol=atol):
        raise ContractError("lambda must be non-negative and sum to one")


def _check_q(q, K):
    q = np.asarray(q, dtype=float)
    if q.shape != (K,):
        raise ContractError(f"posterior factors must have length {K}, got {q.shape}")
    if np.any(q < 0) or np.any(q > 1):
        raise ContractError("posterior factors must lie in [0, 1]")
    return q


def _check_x(x, D):
    x = np.asarray(x)
    if x.shape != (D,):
        raise ContractError(f"observation must have length {D}, got {x.shape}")
    return x.astype(float)


def _check_z(params, i, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (params.K,):
        raise ContractError(f"z must have length {params.K}, got {z.shape}")
    if not 0 <= i < params.D:
        raise ContractError(f"dimension index {i} out of range for D={params.D}")
    return z


# -- likelihood pieces -------------------------------------------------------

def activation(params: ModelParams, i: int, z) -> float:
    z = _check_z(params, i, z)
    return float(params.theta0[i] + params.theta[i] @ z)


def log_lik_negative(params: ModelParams, i: int, z) -> float:
    return -activation(params, i, z)


def log_lik_positive(params: ModelParams, i: int, z) -> float:
    return float(log1mexp(activation(params, i, z)))


def conjugate_f(s: float) -> float:
    """f(s) = log(1 - e^{-s}) for s > 0."""
    if not s > 0:
        raise DomainError(f"f is defined for s > 0, got {s}")
    # no activation floor here: f is evaluated exactly on its whole domain
    return math.log(-math.expm1(-s)) if s < math.log(2.0) else math.log1p(-math.exp(-s))


def conjugate_g(t):
    """Conjugate dual of f: g(t) = -t log t + (t+1) log(t+1), t > 0."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0)):
        raise DomainError(f"g is defined for t > 0, got {t}")
    # (t+1)log(t+1) - t log t rewritten to avoid cancellation for large t
    out = np.log1p(t_arr) + t_arr * np.log1p(1.0 / t_arr)
    return float(out) if out.ndim == 0 else out


def ub_log_lik(params: ModelParams, i: int, z, psi_i: float) -> float:
    if not psi_i > 0:
        raise DomainError(f"psi must be positive, got {psi_i}")
    return psi_i * activation(params, i, z) - conjugate_g(psi_i)


def tight_psi(a):
    """The psi at which the upper bound touches f(a): 1 / (e^a - 1)."""
    a_arr = np.asarray(a, dtype=float)
    if np.any(~(a_arr > 0)):
        raise DomainError(f"tight_psi needs a > 0, got {a}")
    out = 1.0 / np.expm1(a_arr)
    return float(out) if out.ndim == 0 else out


def perspective(lam, theta0, theta):
    """lam * f(theta0 + theta/lam) with its limit 0 at lam = 0 (theta > 0)."""
    lam = np.asarray(lam, dtype=float)
    theta = np.asarray(theta, dtype=float)
    safe = np.where(lam > 0, lam, 1.0)
    val = lam * log1mexp(theta0 + theta / safe)
    val = np.where((lam > 0) | (theta <= 0), val, 0.0)
    return np.where(theta > 0, val, lam * log1mexp(theta0))


def lb_log_lik(params: ModelParams, i: int, z, lambda_i) -> float:
    """Jensen lower bound sum_k lam_k f(theta0_i + theta_ik z_k / lam_k)."""
    z = _check_z(params, i, z)
    lam = np.asarray(lambda_i, dtype=float)
    if lam.shape != (params.K,):
        raise ContractError(f"lambda must have length {params.K}")
    check_simplex(lam)
    if not params.theta0[i] > 0:
        raise DomainError("lower bound needs a positive leak theta0_i")
    return float(np.sum(perspective(lam, params.theta0[i], params.theta[i] * z)))


# -- ELBO terms ---------------------------------------------------------------

def expected_negative_term(params: ModelParams, x, q) -> float:
    x = _check_x(x, params.D)
    q = _check_q(q, params.K)
    neg = x < 0.5
    return -float(np.sum(params.theta0[neg]) + np.sum(params.theta[neg] @ q))


def kl_to_prior(q, mu) -> float:
    q = np.asarray(q, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if q.shape != mu.shape:
        raise ContractError("q and mu must have the same length")
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(q > 0, q * (np.log(q) - np.log(mu)), 0.0)
        t0 = np.where(q < 1, (1 - q) * (np.log1p(-q) - np.log1p(-mu)), 0.0)
    return float(max(np.sum(t1 + t0), 0.0))


def _check_enum(K):
    if K > K_ENUM_MAX:
        raise CapacityError(f"K={K} exceeds the enumeration limit {K_ENUM_MAX}")


def exact_posterior(params: ModelParams, x, backend=None) -> ExactPosterior:
    """Posterior of the true model by enumeration over all 2^K configurations.

    ``table[c]`` is the probability of the configuration with
    ``z_k = (c >> k) & 1``.
    """
    _check_enum(params.K)
    x = _check_x(x, params.D)
    kb = get_backend(backend)
    lm, marg, table = kb.enum_posterior(
        params.theta, params.theta0, np.log(params.mu), np.log1p(-params.mu),
        np.ascontiguousarray(x), True,
    )
    return ExactPosterior(np.asarray(marg), np.asarray(table), float(lm))


def exact_log_marginal(params: ModelParams, x, backend=None) -> float:
    _check_enum(params.K)
    x = _check_x(x, params.D)
    kb = get_backend(backend)
    lm, _, _ = kb.enum_posterior(
        params.theta, params.theta0, np.log(params.mu), np.log1p(-params.mu),
        np.ascontiguousarray(x), False,
    )
    return float(lm)


def expected_positive_exact(params: ModelParams, x, q, backend=None) -> float:
    """sum_{i: x_i=1} E_q[log p(x_i=1|z)] by enumeration."""
    _check_enum(params.K)
    x = _check_x(x, params.D)
    q = _check_q(q, params.K)
    pos = x > 0.5
    kb = get_backend(backend)
    return float(kb.enum_expected_positive(
        np.ascontiguousarray(params.theta[pos]), np.ascontiguousarray(params.theta0[pos]),
        np.ascontiguousarray(q),
    ))


def elbo_exact(params: ModelParams, x, q, backend=None) -> float:
    return (expected_positive_exact(params, x, q, backend)
            + expected_negative_term(params, x, q)
            - kl_to_prior(q, params.mu))


def elbo_terms_batch(params: ModelParams, X, Q):
    """Analytic negative-evidence term and KL for every row. Returns two (N,) arrays."""
    X = np.asarray(X, dtype=float)
    Q = np.asarray(Q, dtype=float)
    neg = 1.0 - X
    negative = -(neg @ params.theta0 + np.sum((neg @ params.theta) * Q, axis=1))
    mu = params.mu
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(Q > 0, Q * (np.log(Q) - np.log(mu)), 0.0)
        t0 = np.where(Q < 1, (1 - Q) * (np.log1p(-Q) - np.log1p(-mu)), 0.0)
    kl = np.maximum(np.sum(t1 + t0, axis=1), 0.0)
    return negative, kl


def positive_mc_batch(params: ModelParams, X, Q, n_samples: int, rng: np.random.Generator,
                      chunk: int = 256):
    """Monte Carlo estimate of the positive term with exact Bernoulli draws.

    Returns per-row means and per-row sample standard deviations. Rows are
    processed in order with a single generator, so the result is a function
    of the generator state only.
    """
    X = np.asarray(X, dtype=float)
    Q = np.asarray(Q, dtype=float)
    N, K = Q.shape
    means = np.empty(N)
    sds = np.empty(N)
    for start in range(0, N, chunk):
        stop = min(N, start + chunk)
        U = rng.random((stop - start, n_samples, K))
        Z = (U < Q[start:stop, None, :]).astype(float)
        A = params.theta0[None, None, :] + Z @ params.theta.T
        vals = np.sum(log1mexp(A) * X[start:stop, None, :], axis=2)
        means[start:stop] = vals.mean(axis=1)
        sds[start:stop] = vals.std(axis=1, ddof=1) if n_samples > 1 else 0.0
    return means, sds


def elbo_mc_batch(params: ModelParams, X, Q, n_samples: int = 100, rng_seed=0):
    """Per-row test-time ELBO: sampled positive term, analytic rest."""
    rng = np.random.default_rng(rng_seed)
    pos_mean, pos_sd = positive_mc_batch(params, X, Q, n_samples, rng)
    negative, kl = elbo_terms_batch(params, X, Q)
    return pos_mean + negative - kl, pos_sd / np.sqrt(n_samples)


def elbo_mc_test(params: ModelParams, x, q, n_samples: int = 100, rng_seed=0,
                 return_se: bool = False):
    x = _check_x(x, params.D)
    q = _check_q(q, params.K)
    if not np.any(x > 0.5):
        value = expected_negative_term(params, x, q) - kl_to_prior(q, params.mu)
        return (value, 0.0) if return_se else value
    vals, ses = elbo_mc_batch(params, x[None, :], q[None, :], n_samples, rng_seed)
    return (float(vals[0]), float(ses[0])) if return_se else float(vals[0])


def sigmoid(v):
    return expit(v)
