"""Synthetic noisy-OR data: patterned and random-sparse weight generators,
ancestral sampling, sparsity and dataset file I/O.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .model import FLOOR_A, BinaryDataset, ModelParams

W_ON = -np.log(1.0 - 0.8)
# leak given to pixels that are white in the leak pattern; keeps every
# activation strictly positive so the lower-bound machinery stays defined
PATTERN_LEAK_FLOOR = FLOOR_A
# value of a masked leak in gen_sparse
SPARSE_LEAK_FLOOR = FLOOR_A
MU_CLAMP = (1e-4, 1.0 - 1e-4)


@dataclass
class PatternSpec:
    """K binary H x W images (1 = black = weight on) plus a leak image."""

    patterns: np.ndarray
    leak: np.ndarray
    w_on: float = float(W_ON)
    mu: object = 0.125
    leak_floor: float = PATTERN_LEAK_FLOOR

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=bool)
        self.leak = np.asarray(self.leak, dtype=bool)
        if self.patterns.ndim != 3:
            raise ContractError("patterns must be a (K, H, W) stack")
        if self.leak.shape != self.patterns.shape[1:]:
            raise ContractError(
                f"leak image {self.leak.shape} does not match pattern size {self.patterns.shape[1:]}")
        if not self.w_on > 0:
            raise ContractError("w_on must be positive")
        if self.leak_floor < 0:
            raise ContractError("leak_floor must be non-negative")

    @property
    def K(self) -> int:
        return self.patterns.shape[0]

    @property
    def shape(self):
        return self.patterns.shape[1:]

    @property
    def D(self) -> int:
        return int(np.prod(self.shape))


def _builtin_bitmaps():
    pats = np.zeros((8, 8, 8), dtype=bool)
    r = np.arange(8)
    pats[0, 1, :] = True
    pats[1, :, 1] = True
    pats[2, 6, :] = True
    pats[3, :, 6] = True
    pats[4, 2:5, 2:5] = True
    pats[5, r, r] = True
    pats[6, r, 7 - r] = True
    pats[7, 3:5, 0] = True
    pats[7, 3:5, 7] = True
    pats[7, 0, 3:5] = True
    pats[7, 7, 3:5] = True
    leak = np.zeros((8, 8), dtype=bool)
    leak[0, 0] = True
    return pats, leak


def syn_pattern_spec(seed=0) -> PatternSpec:
    """The built-in 8x8 bar/block pattern set (D=64, K=8, mu=0.125).

    The seed only fixes the order in which the eight patterns are assigned
    to latent columns.
    """
    pats, leak = _builtin_bitmaps()
    order = np.random.default_rng(seed).permutation(pats.shape[0])
    return PatternSpec(patterns=pats[order], leak=leak)


def gen_patterned(spec: PatternSpec, seed=None) -> ModelParams:
    """Weights are w_on on black pixels of each pattern, 0 elsewhere.

    ``seed`` is accepted for interface symmetry; the construction itself is
    deterministic given ``spec``.
    """
    K = spec.K
    theta = spec.patterns.reshape(K, -1).T.astype(float) * spec.w_on
    theta0 = np.where(spec.leak.reshape(-1), spec.w_on, spec.leak_floor)
    mu = np.broadcast_to(np.asarray(spec.mu, dtype=float), (K,)).copy()
    return ModelParams(theta=theta, theta0=theta0, mu=mu)


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 PGM image into a (H, W) integer array."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ContractError(f"{path}: not a PGM file")
    # header tokens, skipping comments
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    W, H, maxval = tokens
    if magic == b"P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
    else:
        pos += 1
        dt = np.uint8 if maxval < 256 else np.dtype(">u2")
        vals = np.frombuffer(data[pos:], dtype=dt, count=H * W).astype(np.int64)
    if vals.size != H * W:
        raise ContractError(f"{path}: expected {H * W} pixels, found {vals.size}")
    return vals.reshape(H, W)


def load_pattern_spec(pattern_paths: Sequence, leak_path=None, threshold=0.5, **kw) -> PatternSpec:
    """Build a PatternSpec from PGM images; pixels darker than threshold*maxval are on."""
    imgs = [read_pgm(p) for p in pattern_paths]
    if not imgs:
        raise ContractError("at least one pattern image is required")
    shape = imgs[0].shape
    for p, im in zip(pattern_paths, imgs):
        if im.shape != shape:
            raise ContractError(f"{p}: size {im.shape} differs from {shape}")
    pats = np.stack([im < threshold * max(im.max(), 1) for im in imgs])
    if leak_path is None:
        leak = np.zeros(shape, dtype=bool)
    else:
        lim = read_pgm(leak_path)
        if lim.shape != shape:
            raise ContractError(f"{leak_path}: size {lim.shape} differs from {shape}")
        leak = lim < threshold * max(lim.max(), 1)
    return PatternSpec(patterns=pats, leak=leak, **kw)


@dataclass
class SparseSpec:
    D: int
    K: int
    alpha_theta: float
    beta_theta: float
    alpha_mu: float
    beta_mu: float
    s: float
    n_test: int = 1000
    seed: int = 0
    # apply the sparsity mask to the leak as well (masked leaks become
    # SPARSE_LEAK_FLOOR); needed to reach the published sparsity levels
    mask_leak: bool = True

    def __post_init__(self):
        if self.D <= 0 or self.K <= 0:
            raise ContractError("D and K must be positive")
        if not 0 < self.s < 1:
            raise ContractError("s must lie in (0, 1)")
        for name in ("alpha_theta", "beta_theta", "alpha_mu", "beta_mu"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.n_test < 1:
            raise ContractError("n_test must be positive")


# rows of the random-weight table: (D, K, a_th, b_th, a_mu, b_mu, s, n_test)
SPARSE_PRESETS = {
    1: (50, 100, 1, 5, 1, 10, 0.95, 1000),
    2: (50, 100, 2, 5, 2, 5, 0.95, 1000),
    3: (50, 100, 2, 5, 2, 5, 0.90, 1000),
    4: (500, 500, 1, 5, 1, 20, 0.995, 10000),
    5: (500, 500, 1, 20, 1, 20, 0.95, 10000),
    6: (500, 500, 1, 10, 1, 10, 0.95, 10000),
    7: (500, 100, 1, 5, 1, 5, 0.95, 10000),
}

# published sparsity of each preset, for reference
SPARSE_PRESET_SPARSITY = {1: 0.942, 2: 0.718, 3: 0.514, 4: 0.984, 5: 0.953, 6: 0.736, 7: 0.892}


def sparse_preset(row: int, seed=0, **overrides) -> SparseSpec:
    D, K, at, bt, am, bm, s, n_test = SPARSE_PRESETS[row]
    kw = dict(D=D, K=K, alpha_theta=at, beta_theta=bt, alpha_mu=am, beta_mu=bm,
              s=s, n_test=n_test, seed=seed)
    kw.update(overrides)
    return SparseSpec(**kw)


def gen_sparse(spec: SparseSpec) -> ModelParams:
    rng = np.random.default_rng(spec.seed)
    D, K = spec.D, spec.K
    theta = rng.beta(spec.alpha_theta, spec.beta_theta, size=(D, K))
    theta0 = rng.beta(spec.alpha_theta, spec.beta_theta, size=D)
    mu = rng.beta(spec.alpha_mu, spec.beta_mu, size=K)
    theta[rng.random((D, K)) < spec.s] = 0.0
    if spec.mask_leak:
        theta0[rng.random(D) < spec.s] = SPARSE_LEAK_FLOOR
    # orphan fix-up: one fresh connection per unconnected row, then column
    for i in np.nonzero(theta.sum(axis=1) == 0)[0]:
        theta[i, rng.integers(K)] = rng.beta(spec.alpha_theta, spec.beta_theta)
    for k in np.nonzero(theta.sum(axis=0) == 0)[0]:
        theta[rng.integers(D), k] = rng.beta(spec.alpha_theta, spec.beta_theta)
    theta0 = np.maximum(theta0, SPARSE_LEAK_FLOOR)
    return ModelParams(theta=theta, theta0=theta0, mu=np.clip(mu, *MU_CLAMP))


def sample_dataset(params: ModelParams, N: int, seed=0, keep_latents: bool = True) -> BinaryDataset:
    """Ancestral sampling: z ~ Bernoulli(mu), then x_i = 0 w.p. exp(-a_i(z))."""
    if N < 1:
        raise ContractError("N must be at least 1")
    rng = np.random.default_rng(seed)
    Z = (rng.random((N, params.K)) < params.mu).astype(np.uint8)
    A = params.theta0 + Z @ params.theta.T
    X = (rng.random((N, params.D)) >= np.exp(-A)).astype(np.uint8)
    return BinaryDataset(X, Z if keep_latents else None)


def sparsity(ds) -> float:
    x = ds.x if isinstance(ds, BinaryDataset) else np.asarray(ds)
    if x.size == 0:
        return 0.0
    return float(np.count_nonzero(x == 0)) / x.size


def expected_sparsity(params: ModelParams) -> float:
    """Analytic mean of sparsity under the model: mean_i E[exp(-a_i)]."""
    per_dim = np.exp(-params.theta0) * np.prod(1.0 - params.mu * (-np.expm1(-params.theta)), axis=1)
    return float(per_dim.mean())


# -- files ----------------------------------------------------------------------

def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _bits(rows: np.ndarray) -> str:
    if rows.shape[0] == 0:
        return ""
    lut = np.array([ord("0"), ord("1")], dtype=np.uint8)
    chars = lut[rows]
    nl = np.full((rows.shape[0], 1), ord("\n"), dtype=np.uint8)
    return np.hstack([chars, nl]).tobytes().decode("ascii")


def dataset_to_text(ds: BinaryDataset) -> str:
    has_z = ds.z_true is not None
    K = ds.z_true.shape[1] if has_z else 0
    out = [f"NOR-DS v1 D={ds.D} K={K} N={ds.N} latents={int(has_z)}\n", _bits(ds.x)]
    if has_z:
        out.append("\n")
        out.append(_bits(ds.z_true))
    return "".join(out)


def _parse_bits(lines, width, what):
    arr = np.zeros((len(lines), width), dtype=np.uint8)
    for n, line in enumerate(lines):
        if len(line) != width or set(line) - {"0", "1"}:
            raise ContractError(f"bad {what} row {n}: expected {width} characters in {{0,1}}")
        arr[n] = np.frombuffer(line.encode("ascii"), dtype=np.uint8) - ord("0")
    return arr


def dataset_from_text(text: str) -> BinaryDataset:
    lines = text.split("\n")
    head = lines[0].split()
    if head[:2] != ["NOR-DS", "v1"]:
        raise ContractError("not a NOR-DS v1 dataset file")
    try:
        meta = dict(tok.split("=", 1) for tok in head[2:])
        D, K, N, lat = (int(meta[k]) for k in ("D", "K", "N", "latents"))
    except (KeyError, ValueError):
        raise ContractError("malformed dataset header") from None
    x = _parse_bits(lines[1:1 + N], D, "observation")
    z = None
    if lat:
        if lines[1 + N] != "":
            raise ContractError("expected a blank line before the latent block")
        z = _parse_bits(lines[2 + N:2 + 2 * N], K, "latent")
    if D == 0 and N:
        x = x.reshape(N, 0)
    return BinaryDataset(x, z)


def write_dataset(path, ds: BinaryDataset):
    atomic_write_text(path, dataset_to_text(ds))


def read_dataset(path) -> BinaryDataset:
    return dataset_from_text(Path(path).read_text(encoding="utf-8"))


def write_params(path, params: ModelParams):
    atomic_write_text(path, params.to_json())


def read_params(path) -> ModelParams:
    return ModelParams.from_json(Path(path).read_text(encoding="utf-8"))
