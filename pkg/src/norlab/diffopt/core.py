"""Flat parameter vectors, constraint transforms, finite-difference checking,
the binary Gumbel-softmax relaxation, the temperature schedule and Adam.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.special import expit, logit

from ..errors import ContractError, NumericalAbort

TRANSFORMS = ("softplus", "sigmoid", "identity", "softmax")
Q_CLAMP = 1e-7


def softplus_inv(v):
    v = np.asarray(v, dtype=float)
    # log(expm1(v)) without overflow for large v
    return v + np.log(-np.expm1(-v))


class ConstraintMap:
    """Maps each segment name to one transform tag."""

    def __init__(self, tags: Dict[str, str]):
        for name, tag in tags.items():
            if tag not in TRANSFORMS:
                raise ContractError(f"unknown transform {tag!r} for segment {name!r}")
        self.tags = dict(tags)

    def __getitem__(self, name):
        return self.tags[name]

    def __contains__(self, name):
        return name in self.tags

    @staticmethod
    def forward(tag, raw):
        if tag == "softplus":
            return np.logaddexp(0.0, raw)
        if tag == "sigmoid":
            return expit(raw)
        if tag == "softmax":
            e = np.exp(raw - raw.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return raw

    @staticmethod
    def inverse(tag, value):
        value = np.asarray(value, dtype=float)
        if tag == "softplus":
            return softplus_inv(value)
        if tag == "sigmoid":
            return logit(value)
        if tag == "softmax":
            return np.log(value)
        return value.copy()

    @staticmethod
    def backward(tag, raw, grad_value):
        """Gradient w.r.t. raw given the gradient w.r.t. the constrained value."""
        if tag == "softplus":
            return grad_value * expit(raw)
        if tag == "sigmoid":
            s = expit(raw)
            return grad_value * s * (1.0 - s)
        if tag == "softmax":
            p = ConstraintMap.forward("softmax", raw)
            return p * (grad_value - np.sum(p * grad_value, axis=-1, keepdims=True))
        return grad_value


@dataclass(frozen=True)
class Segment:
    start: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.start + self.size


class FlatParams:
    """One contiguous float vector with named, non-overlapping segments."""

    def __init__(self, values, layout: Dict[str, Segment], constraints: ConstraintMap,
                 meta: Optional[dict] = None):
        self.values = np.ascontiguousarray(values, dtype=float)
        self.layout = dict(layout)
        self.constraints = constraints
        self.meta = dict(meta or {})
        covered = np.zeros(self.values.size, dtype=np.int64)
        for name, seg in self.layout.items():
            if name not in constraints:
                raise ContractError(f"segment {name!r} has no transform")
            covered[seg.start:seg.stop] += 1
        if self.values.ndim != 1 or np.any(covered != 1):
            raise ContractError("layout must cover the vector exactly, without overlaps")

    @classmethod
    def build(cls, segments: Iterable[Tuple[str, np.ndarray, str]], meta=None, raw=False):
        """Segments given as (name, value, transform); values are constrained
        unless ``raw`` is true."""
        layout, tags, chunks = {}, {}, []
        pos = 0
        for name, value, tag in segments:
            value = np.asarray(value, dtype=float)
            r = value if raw else ConstraintMap.inverse(tag, value)
            layout[name] = Segment(pos, tuple(value.shape))
            tags[name] = tag
            chunks.append(np.ravel(r))
            pos += value.size
        vec = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(vec, layout, ConstraintMap(tags), meta)

    @property
    def size(self) -> int:
        return self.values.size

    def names(self):
        return list(self.layout)

    def raw(self, name) -> np.ndarray:
        seg = self.layout[name]
        return self.values[seg.start:seg.stop].reshape(seg.shape)

    def value(self, name) -> np.ndarray:
        return ConstraintMap.forward(self.constraints[name], self.raw(name))

    def indices(self, names) -> np.ndarray:
        parts = [np.arange(self.layout[n].start, self.layout[n].stop) for n in names]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def with_values(self, values) -> "FlatParams":
        return FlatParams(values, self.layout, self.constraints, self.meta)

    def copy(self) -> "FlatParams":
        return self.with_values(self.values.copy())

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.values)

    def put(self, grad_vec, name, grad_value):
        """Add the gradient w.r.t. a segment's constrained value into ``grad_vec``."""
        seg = self.layout[name]
        g = ConstraintMap.backward(self.constraints[name], self.raw(name), grad_value)
        grad_vec[seg.start:seg.stop] += np.ravel(g)


def grad_check(fn: Callable, p: FlatParams, h: float = 1e-5, max_coords: int = 400,
               rng=0) -> float:
    """Max relative error between ``fn``'s gradient and central differences.

    ``fn(p)`` returns ``(value, grad_vector)``. Every coordinate is checked
    unless there are more than ``max_coords``, in which case a random subset
    of that many is used. The denominator is max(|g|, 1e-8).
    """
    f0, g = fn(p)
    if not np.isfinite(f0):
        raise NumericalAbort("loss is not finite at the check point")
    g = np.asarray(g, dtype=float)
    n = p.size
    if n > max_coords:
        coords = np.sort(np.random.default_rng(rng).choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)
    worst = 0.0
    for j in coords:
        v = p.values.copy()
        v[j] += h
        fp = fn(p.with_values(v))[0]
        v[j] -= 2 * h
        fm = fn(p.with_values(v))[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalAbort(f"loss is not finite when perturbing coordinate {j}", index=int(j))
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(fd - g[j]) / max(abs(g[j]), 1e-8))
    return worst


def gumbel_softmax_sample(q, tau, noise):
    """Binary relaxed sample sigmoid((logit q + g1 - g0) / tau); ``noise = (g1, g0)``."""
    if not tau > 0:
        raise ContractError("temperature must be positive")
    g1, g0 = noise
    q = np.clip(np.asarray(q, dtype=float), Q_CLAMP, 1.0 - Q_CLAMP)
    return expit((logit(q) + np.asarray(g1) - np.asarray(g0)) / tau)


def temperature_at(step: int, cfg) -> float:
    if step < 0:
        raise ContractError("step must be non-negative")
    return max(cfg.tau_min, cfg.tau0 * cfg.tau_decay ** (step // cfg.tau_interval))


class Adam:
    """Bias-corrected Adam. ``step`` may restrict the update to an index set
    (the moments of other coordinates are left untouched)."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x, grad, idx=None):
        grad = np.asarray(grad, dtype=float)
        if x.shape != grad.shape or x.shape != self.m.shape:
            raise ContractError("parameter and gradient shapes differ")
        if not np.all(np.isfinite(grad if idx is None else grad[idx])):
            bad = np.nonzero(~np.isfinite(grad))[0]
            raise NumericalAbort("non-finite gradient", index=int(bad[0]))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        sel = slice(None) if idx is None else idx
        g = grad[sel]
        self.m[sel] = b1 * self.m[sel] + (1 - b1) * g
        self.v[sel] = b2 * self.v[sel] + (1 - b2) * g * g
        mhat = self.m[sel] / (1 - b1 ** self.t)
        vhat = self.v[sel] / (1 - b2 ** self.t)
        out = x.copy()
        out[sel] = x[sel] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params, state: Optional[AdamState], grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update: returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=float)
    if state is None:
        state = AdamState(np.zeros_like(params), np.zeros_like(params), 0)
    opt = Adam(params.size, lr, beta1, beta2, eps)
    opt.m, opt.v, opt.t = state.m.ravel().copy(), state.v.ravel().copy(), state.t
    new = opt.step(params.ravel(), np.asarray(grads, dtype=float).ravel())
    return new.reshape(params.shape), AdamState(opt.m.reshape(params.shape),
                                                opt.v.reshape(params.shape), opt.t)
