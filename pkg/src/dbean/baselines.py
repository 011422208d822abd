"""Bag-of-words, TFIDF and bag-of-means features with a softmax-regression head."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, softmax_rows
from .text import DataError

log = logging.getLogger(__name__)

SPARSE_MAGIC = "DBEAN-SPARSE-1"


# --------------------------------------------------------------------------
# bag of words


@dataclass
class BowVocab:
    words: list[str]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def build(cls, docs: Iterable[Sequence[str]], max_size: int = 50_000) -> "BowVocab":
        """Top ``max_size`` words by training frequency, ties broken lexicographically."""
        counts = Counter()
        for doc in docs:
            counts.update(doc)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:max_size]])


def bow_featurize(doc: Sequence[str], vocab: BowVocab) -> dict[int, int]:
    """Raw term counts keyed by vocabulary column; OOV words are dropped."""
    counts: dict[int, int] = {}
    for w in doc:
        j = vocab.index.get(w)
        if j is not None:
            counts[j] = counts.get(j, 0) + 1
    return counts


def bow_matrix(docs: Sequence[Sequence[str]], vocab: BowVocab) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, doc in enumerate(docs):
        for j, c in bow_featurize(doc, vocab).items():
            rows.append(i)
            cols.append(j)
            vals.append(c)
    return sp.csr_matrix((np.array(vals, dtype=np.float64), (rows, cols)),
                         shape=(len(docs), len(vocab)))


@dataclass
class TfidfTransform:
    """Smoothed idf ``ln((1 + N) / (1 + df)) + 1`` with L2-normalized rows."""

    idf: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fit(cls, counts: sp.spmatrix) -> "TfidfTransform":
        counts = sp.csr_matrix(counts)
        n = counts.shape[0]
        df = np.bincount(counts.indices, minlength=counts.shape[1])
        return cls(np.log((1.0 + n) / (1.0 + df)) + 1.0)

    def transform(self, counts: sp.spmatrix) -> sp.csr_matrix:
        if counts.shape[1] != self.idf.size:
            raise ShapeError(f"tfidf fitted on {self.idf.size} columns, got {counts.shape[1]}")
        weighted = sp.csr_matrix(counts, dtype=np.float64) @ sp.diags(self.idf)
        weighted = sp.csr_matrix(weighted)
        norms = np.sqrt(np.asarray(weighted.multiply(weighted).sum(axis=1)).ravel())
        norms[norms == 0] = 1.0
        return sp.csr_matrix(sp.diags(1.0 / norms) @ weighted)


def tfidf_transform(train_counts, *others):
    """Fit idf on ``train_counts`` and apply it to it and every other matrix."""
    tf = TfidfTransform.fit(train_counts)
    out = [tf.transform(train_counts)] + [tf.transform(m) for m in others]
    return out[0] if not others else tuple(out)


# --------------------------------------------------------------------------
# k-means and bag of means


@dataclass
class KMeansModel:
    centroids: np.ndarray
    words: list[str] = field(default_factory=list)
    assignment: dict[str, int] = field(default_factory=dict)
    inertia_trace: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((X.shape[0], C.shape[0]), dtype=np.float64)
    cn = np.einsum("ij,ij->i", C, C)
    for s in range(0, X.shape[0], chunk):
        x = X[s:s + chunk]
        d = np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * (x @ C.T) + cn[None, :]
        out[s:s + chunk] = np.maximum(d, 0.0)
    return out


def _nearest(X, C, chunk: int = 4096):
    labels = np.empty(X.shape[0], dtype=np.int64)
    dmin = np.empty(X.shape[0], dtype=np.float64)
    cn = np.einsum("ij,ij->i", C, C)
    for s in range(0, X.shape[0], chunk):
        x = X[s:s + chunk]
        d = np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * (x @ C.T) + cn[None, :]
        lab = d.argmin(axis=1)
        labels[s:s + chunk] = lab
        diff = x - C[lab]
        dmin[s:s + chunk] = np.einsum("ij,ij->i", diff, diff)
    return labels, dmin


def kmeans_fit(vectors: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
               words: Sequence[str] | None = None) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded with the point farthest from its centroid.
    Stops at an assignment fixpoint or after ``max_iter`` iterations.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if n == 0:
        raise ValueError("k-means needs at least one vector")
    if k > n:
        log.warning("k-means: k=%d exceeds %d vectors, reducing k", k, n)
        k = n
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centroids[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centroids[c:c + 1])[:, 0])

    labels, dmin = _nearest(X, centroids)
    trace = [float(dmin.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        new = centroids.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        # refill empty clusters from the worst-fit points
        if (~nonempty).any():
            far = np.argsort(-dmin, kind="stable")
            for c, idx in zip(np.flatnonzero(~nonempty), far):
                new[c] = X[idx]
        centroids = new
        new_labels, dmin = _nearest(X, centroids)
        trace.append(float(dmin.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    words = list(words) if words is not None else []
    assignment = {w: int(l) for w, l in zip(words, labels)}
    return KMeansModel(centroids, words, assignment, trace, it)


def bom_featurize(doc: Sequence[str], km: KMeansModel) -> np.ndarray:
    """L1-normalized histogram of the clusters of the doc's in-model words."""
    v = np.zeros(km.k)
    for w in doc:
        c = km.assignment.get(w)
        if c is not None:
            v[c] += 1
    s = v.sum()
    return v / s if s else v


def bom_matrix(docs: Sequence[Sequence[str]], km: KMeansModel) -> np.ndarray:
    return np.stack([bom_featurize(d, km) for d in docs]) if docs else np.zeros((0, km.k))


def frequent_words(docs: Iterable[Sequence[str]], min_count: int = 5) -> list[str]:
    """Words occurring strictly more than ``min_count`` times, sorted."""
    counts = Counter()
    for d in docs:
        counts.update(d)
    return sorted(w for w, c in counts.items() if c > min_count)


# --------------------------------------------------------------------------
# softmax regression


@dataclass
class LogRegModel:
    weight: np.ndarray   # (C, n_features)
    bias: np.ndarray     # (C,)

    @property
    def n_features(self) -> int:
        return self.weight.shape[1]


def _check_features(X, n_features):
    if X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features, got {X.shape[1]}")


def logreg_proba(model: LogRegModel, X) -> np.ndarray:
    _check_features(X, model.n_features)
    logits = np.asarray(X @ model.weight.T) + model.bias
    return softmax_rows(logits)


def logreg_predict(model: LogRegModel, X) -> np.ndarray:
    return logreg_proba(model, X).argmax(axis=1)


def logreg_loss_and_grads(model: LogRegModel, X, y):
    """Mean cross-entropy and its gradients for a mini-batch."""
    P = logreg_proba(model, X)
    n = P.shape[0]
    loss = float(-np.log(np.maximum(P[np.arange(n), y], 1e-12)).mean())
    D = P.copy()
    D[np.arange(n), y] -= 1.0
    D /= n
    gw = np.asarray((X.T @ D).T) if sp.issparse(X) else D.T @ X
    return loss, gw, D.sum(axis=0)


def logreg_train(X, y, epochs: int = 10, lr: float = 0.5, batch_size: int = 64,
                 n_classes: int = 4, seed: int = 0, lr_decay: float = 0.9) -> LogRegModel:
    """Softmax regression by shuffled mini-batch SGD on cross-entropy."""
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ShapeError(f"{X.shape[0]} feature rows vs {y.shape[0]} labels")
    if sp.issparse(X):
        X = sp.csr_matrix(X)
    model = LogRegModel(np.zeros((n_classes, X.shape[1])), np.zeros(n_classes))
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    for epoch in range(epochs):
        step = lr * lr_decay ** epoch
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            _, gw, gb = logreg_loss_and_grads(model, X[idx], y[idx])
            model.weight -= step * gw
            model.bias -= step * gb
    return model


# --------------------------------------------------------------------------
# sparse feature cache


def save_sparse(matrix, path) -> None:
    m = sp.coo_matrix(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{SPARSE_MAGIC}\n{m.shape[0]} {m.shape[1]} {m.nnz}\n")
        for r, c, v in zip(m.row, m.col, m.data):
            fh.write(f"{r} {c} {float(v)!r}\n")


def load_sparse(path) -> sp.csr_matrix:
    with open(path, encoding="utf-8") as fh:
        if fh.readline().rstrip("\n") != SPARSE_MAGIC:
            raise DataError(f"{path}: not a {SPARSE_MAGIC} file")
        n_rows, n_cols, nnz = (int(x) for x in fh.readline().split())
        rows, cols, vals = [], [], []
        for lineno, line in enumerate(fh, start=3):
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'row col value'")
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
            vals.append(float(parts[2]))
    if len(vals) != nnz:
        raise DataError(f"{path}: expected {nnz} entries, found {len(vals)}")
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_rows, n_cols))
