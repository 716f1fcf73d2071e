"""Evaluation: held-out NELBO, latent recovery scores, permutation-matched
pattern recovery, and PMI topic coherence over a tokenized corpus.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, NorlabError
from .model import ModelParams, elbo_mc_batch

DEFAULT_EVAL_SEED = 9001
WINDOW = 5


class MissingWordError(NorlabError, KeyError):
    """A word is absent from the co-occurrence statistics."""


def infer_latents(q, threshold=0.5, sample=False, rng=None) -> np.ndarray:
    """Threshold (q >= threshold) or, with ``sample``, draw z ~ Bernoulli(q)."""
    q = np.asarray(q, dtype=float)
    if sample:
        rng = np.random.default_rng(rng)
        return (rng.random(q.shape) < q).astype(np.uint8)
    return (q >= threshold).astype(np.uint8)


def _pair(z_true, z_pred):
    a = np.asarray(z_true).astype(bool)
    b = np.asarray(z_pred).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[None, :], b[None, :]
    return a, b


def macro_f1(z_true, z_pred) -> float:
    """Per-latent F1 over the data axis, averaged over latents (0 when a
    latent has no true and no predicted positives)."""
    a, b = _pair(z_true, z_pred)
    tp = np.sum(a & b, axis=0)
    fp = np.sum(~a & b, axis=0)
    fn = np.sum(a & ~b, axis=0)
    den = 2 * tp + fp + fn
    f1 = np.where(den > 0, 2 * tp / np.maximum(den, 1), 0.0)
    return float(f1.mean())


def exact_match(z_true, z_pred) -> float:
    a, b = _pair(z_true, z_pred)
    return float(np.mean(np.all(a == b, axis=1)))


def heldout_nelbo(params: ModelParams, q_provider, dataset, n_samples=100, seed=DEFAULT_EVAL_SEED,
                  batched=False) -> float:
    """Mean negative test ELBO with the sampled positive term.

    ``q_provider`` maps one observation to its posterior factors, or the
    whole matrix at once when ``batched`` is set.
    """
    X = np.asarray(getattr(dataset, "x", dataset), dtype=float)
    if batched:
        Q = np.asarray(q_provider(X), dtype=float)
    else:
        Q = np.array([q_provider(x) for x in X], dtype=float).reshape(X.shape[0], params.K)
    vals, _ = elbo_mc_batch(params, X, Q, n_samples, seed)
    return -float(np.mean(vals))


# -- pattern recovery --------------------------------------------------------------------

@dataclass
class PatternMatch:
    assignment: np.ndarray   # assignment[k] = learned column matched to true column k
    scores: np.ndarray       # matched correlation per true column
    mean: float
    corr: np.ndarray         # (K_true, K_learned) correlation matrix


def column_correlations(A, B) -> np.ndarray:
    """Pearson correlation between every column of A and every column of B;
    0 whenever either column is constant."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    na = np.sqrt(np.sum(Ac * Ac, axis=0))
    nb = np.sqrt(np.sum(Bc * Bc, axis=0))
    num = Ac.T @ Bc
    den = np.outer(na, nb)
    tiny = 1e-12 * max(1.0, float(np.abs(A).max(initial=0)), float(np.abs(B).max(initial=0)))
    ok = (na[:, None] > tiny) & (nb[None, :] > tiny)
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def match_patterns(theta_learned, theta_true) -> PatternMatch:
    L = np.asarray(theta_learned, dtype=float)
    T = np.asarray(theta_true, dtype=float)
    if L.shape != T.shape:
        raise ContractError(f"learned {L.shape} and true {T.shape} shapes differ")
    C = column_correlations(T, L)
    rows, cols = linear_sum_assignment(C, maximize=True)
    assignment = np.empty(T.shape[1], dtype=np.int64)
    assignment[rows] = cols
    scores = C[rows, cols]
    return PatternMatch(assignment, scores, float(scores.mean()), C)


# -- co-occurrence and PMI ---------------------------------------------------------------------

@dataclass
class CooccurrenceStats:
    """Counts over a tokenized corpus.

    ``unigrams`` are token counts. ``pairs`` counts unordered position pairs
    closer than ``window`` tokens inside one document, keyed "w1 w2" with
    w1 <= w2. ``total_windows`` is the number of such position pairs.
    """

    window: int
    total_windows: int
    unigrams: Dict[str, int]
    pairs: Dict[str, int] = field(default_factory=dict)

    @property
    def total_tokens(self) -> int:
        return int(sum(self.unigrams.values()))

    def to_json(self) -> str:
        doc = {"window": self.window, "total_windows": self.total_windows,
               "unigrams": dict(sorted(self.unigrams.items())),
               "pairs": dict(sorted(self.pairs.items()))}
        return json.dumps(doc, ensure_ascii=False, indent=0) + "\n"

    @classmethod
    def from_json(cls, text) -> "CooccurrenceStats":
        d = json.loads(text)
        return cls(int(d["window"]), int(d["total_windows"]),
                   {k: int(v) for k, v in d["unigrams"].items()},
                   {k: int(v) for k, v in d["pairs"].items()})


def read_corpus(path) -> List[List[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh]


def build_cooccurrence(docs: Sequence[Sequence[str]], window: int = WINDOW) -> CooccurrenceStats:
    vocab = sorted({w for doc in docs for w in doc})
    index = {w: i for i, w in enumerate(vocab)}
    V = len(vocab)
    uni = np.zeros(V, dtype=np.int64)
    keys = []
    total = 0
    for doc in docs:
        ids = np.fromiter((index[w] for w in doc), dtype=np.int64, count=len(doc))
        uni += np.bincount(ids, minlength=V)
        for d in range(1, window):
            if ids.size <= d:
                break
            a, b = ids[:-d], ids[d:]
            keys.append(np.minimum(a, b) * V + np.maximum(a, b))
            total += a.size
    pairs = {}
    if keys:
        k, c = np.unique(np.concatenate(keys), return_counts=True)
        for key, cnt in zip(k.tolist(), c.tolist()):
            pairs[f"{vocab[key // V]} {vocab[key % V]}"] = cnt
    unigrams = {w: int(n) for w, n in zip(vocab, uni.tolist())}
    return CooccurrenceStats(window, total, unigrams, pairs)


def pmi(stats: CooccurrenceStats, w_i: str, w_j: str) -> float:
    """log p(w_i, w_j) / (p(w_i) p(w_j)) with add-one smoothing on the joint."""
    for w in (w_i, w_j):
        if w not in stats.unigrams or stats.unigrams[w] == 0:
            raise MissingWordError(w)
    a, b = (w_i, w_j) if w_i <= w_j else (w_j, w_i)
    joint = stats.pairs.get(f"{a} {b}", 0) + 1
    n = stats.total_tokens
    # an unordered pair of distinct words covers two ordered outcomes
    denom = stats.total_windows if a == b else 2 * stats.total_windows
    if denom == 0:
        raise ContractError("co-occurrence statistics contain no windows")
    p_joint = joint / denom
    return float(np.log(p_joint) - np.log(stats.unigrams[a] / n) - np.log(stats.unigrams[b] / n))


@dataclass
class TopicReport:
    words: List[List[str]]
    topic_pmi: List[float]
    excluded: List[int]
    overall: float


def top_words(theta, vocab, top_n=10):
    theta = np.asarray(theta, dtype=float)
    out = []
    for k in range(theta.shape[1]):
        order = np.argsort(-theta[:, k], kind="stable")[:top_n]
        out.append([vocab[i] for i in order])
    return out


def topic_report(params, vocab, top_n=10, cooccur: CooccurrenceStats = None) -> TopicReport:
    theta = params.theta if isinstance(params, ModelParams) else np.asarray(params)
    if len(vocab) != theta.shape[0]:
        raise ContractError(f"vocabulary has {len(vocab)} words, model has D={theta.shape[0]}")
    words = top_words(theta, vocab, top_n)
    scores, excluded = [], []
    for ws in words:
        vals, miss = [], 0
        for a in range(len(ws)):
            for b in range(a + 1, len(ws)):
                try:
                    vals.append(pmi(cooccur, ws[a], ws[b]))
                except MissingWordError:
                    miss += 1
        scores.append(float(np.mean(vals)) if vals else float("nan"))
        excluded.append(miss)
    finite = [s for s in scores if np.isfinite(s)]
    overall = float(np.mean(finite)) if finite else float("nan")
    return TopicReport(words, scores, excluded, overall)


def save_cooccurrence(stats: CooccurrenceStats, path):
    from .datagen import atomic_write_text
    atomic_write_text(path, stats.to_json())


def load_cooccurrence(path) -> CooccurrenceStats:
    return CooccurrenceStats.from_json(Path(path).read_text(encoding="utf-8"))
