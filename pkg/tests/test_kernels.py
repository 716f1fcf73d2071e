"""Both kernel backends must agree with each other and with the model API."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from norlab import kernels
from norlab.kernels import BACKENDS, get_backend

from conftest import random_params

needs_both = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert get_backend("python") is BACKENDS["python"]


def test_unknown_backend():
    with pytest.raises(ValueError):
        get_backend("fortran")


def test_env_var_forces_fallback():
    code = "from norlab.kernels import BACKEND_NAME; print(BACKEND_NAME)"
    env = dict(os.environ, NORLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


@needs_both
def test_compiled_backend_is_default():
    if os.environ.get("NORLAB_PURE_PYTHON") in ("1", "true", "yes"):
        pytest.skip("fallback forced by environment")
    assert kernels.BACKEND_NAME == "cython"


def _instance(seed, D, K):
    rng = np.random.default_rng(seed)
    p = random_params(rng, D, K)
    x = (rng.random(D) < 0.5).astype(float)
    return rng, p, x


@needs_both
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), D=st.integers(1, 12), K=st.integers(1, 9),
       table=st.booleans())
def test_enum_posterior_parity(seed, D, K, table):
    _, p, x = _instance(seed, D, K)
    args = (p.theta, p.theta0, np.log(p.mu), np.log1p(-p.mu), x, table)
    a = BACKENDS["python"].enum_posterior(*args)
    b = BACKENDS["cython"].enum_posterior(*args)
    assert a[0] == pytest.approx(b[0], abs=1e-11)
    assert np.allclose(a[1], b[1], atol=1e-12)
    if table:
        assert np.allclose(a[2], b[2], atol=1e-13)


@needs_both
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), D=st.integers(0, 10), K=st.integers(1, 9))
def test_enum_expected_positive_parity(seed, D, K):
    rng, p, _ = _instance(seed, max(D, 1), K)
    th, th0 = p.theta[:D].copy(), p.theta0[:D].copy()
    q = rng.random(K)
    a = BACKENDS["python"].enum_expected_positive(th, th0, q)
    b = BACKENDS["cython"].enum_expected_positive(th, th0, q)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@needs_both
@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), D=st.integers(1, 20), K=st.integers(1, 10))
def test_ub_kernels_parity(seed, D, K):
    rng, p, _ = _instance(seed, D, K)
    lm = np.ascontiguousarray(p.logit_mu)
    a = BACKENDS["python"].ub_prior_psi(p.theta, p.theta0, lm)
    b = BACKENDS["cython"].ub_prior_psi(p.theta, p.theta0, lm)
    assert np.allclose(a, b, rtol=1e-9)
    X = (rng.random((4, D)) < 0.5).astype(float)
    pa, pb = np.ones((4, D)), np.ones((4, D))
    BACKENDS["python"].ub_sweep(p.theta, p.theta0, lm, X, pa)
    BACKENDS["cython"].ub_sweep(p.theta, p.theta0, lm, X, pb)
    assert np.allclose(pa, pb, rtol=1e-8)


@needs_both
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), M=st.integers(1, 12), K=st.integers(1, 6))
def test_lb_tighten_parity(seed, M, K):
    rng = np.random.default_rng(seed)
    th = rng.gamma(0.7, 1.0, (M, K))
    th0 = rng.uniform(0.01, 0.5, M)
    Q = rng.random((M, K))
    la = np.full((M, K), 1.0 / K)
    lb = la.copy()
    ta, na = BACKENDS["python"].lb_tighten(th, th0, Q, la, 1e-12, 100)
    tb, nb = BACKENDS["cython"].lb_tighten(th, th0, Q, lb, 1e-12, 100)
    assert np.allclose(np.asarray(ta)[-1], np.asarray(tb)[-1], atol=1e-9)
    assert np.allclose(la, lb, atol=1e-6)


def test_kernels_accept_read_only_inputs(backend):
    rng = np.random.default_rng(0)
    p = random_params(rng, 5, 3)
    kb = get_backend(backend)
    x = np.array([1.0, 0, 1, 0, 0])
    x.setflags(write=False)
    lm = p.logit_mu.copy()
    lm.setflags(write=False)
    kb.enum_posterior(p.theta, p.theta0, np.log(p.mu), np.log1p(-p.mu), x, True)
    kb.ub_prior_psi(p.theta, p.theta0, lm)
