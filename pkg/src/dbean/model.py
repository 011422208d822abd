"""Dynamic bidirectional Elman network with attention (DBEAN).

Forward graph for one sequence ``x_1..x_L``::

    H_f[t]  = tanh(W [H_f[t-1]; x_t] + b_f)                 chronological
    G[s]    = tanh(W [G[s-1]; x_{L+1-s}] + b_b)             reversed, same W
    H_b[t]  = G[L+1-t]                                      re-aligned
    fused_t = [H_f[t]; H_b[t]]
    A       = softmax_t(alpha * W_a [fused_t; fused_{t-1}])  fused_0 = 0
    r_t     = tanh(W_d [fused_t; A_t]);   H_att = sum_t A_t r_t
    Y       = softmax(W_o [H_f[L]; H_b[1]; H_att] + b_o)

Batched internals are time-major ``(T, B, ...)`` with right padding; padded
steps are computed but masked out of every downstream quantity, so they never
reach the loss or the gradients. An auxiliary head ``W_ssl`` predicts the next
reversed token's embedding from each backward state; it is the label-free
objective used for test-time adaptation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels
from .tensor import ShapeError, Tensor2D, concat_vec, matmul, softmax_rows, tanh_act, transpose, add
from .text import TokenizedExample

N_CLASSES = 4
PARAM_ORDER = ("W", "b_f", "b_b", "W_a", "log_alpha", "W_d", "W_o", "b_o", "W_ssl", "E")


class DegenerateInputError(ValueError):
    pass


class ModelParams:
    """All DBEAN weights.

    ``W`` is the single recurrent matrix ``[W_h | W_x]`` of shape
    ``(h, h + d)``; both directions read this one array. ``log_alpha`` stores
    the attention scale as ``exp(log_alpha)`` so it stays positive.
    """

    def __init__(self, tensors: dict[str, Tensor2D]):
        missing = set(PARAM_ORDER) - set(tensors)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name in PARAM_ORDER:
            setattr(self, name, tensors[name])
        h = self.W.rows
        d = self.E.cols
        if self.W.cols != h + d:
            raise ShapeError(f"W is {self.W.shape}, expected ({h}, {h + d})")
        self.hidden, self.embed_dim = h, d
        self.att_hidden = self.W_d.rows
        self.n_classes = self.W_o.rows

    @classmethod
    def init(cls, vocab_size: int, embed_dim: int = 300, hidden: int = 128, att_hidden: int = 64,
             n_classes: int = N_CLASSES, seed: int = 0, embeddings: np.ndarray | None = None,
             dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)

        def uniform(rows, cols, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor2D(rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype))

        h, d = hidden, embed_dim
        tensors = {
            "W": uniform(h, h + d, h + d),
            "b_f": Tensor2D(np.zeros((1, h), dtype=dtype)),
            "b_b": Tensor2D(np.zeros((1, h), dtype=dtype)),
            "W_a": uniform(1, 4 * h, 4 * h),
            "log_alpha": Tensor2D(np.full((1, 1), -0.5 * math.log(2 * h), dtype=dtype)),
            "W_d": uniform(att_hidden, 2 * h + 1, 2 * h + 1),
            "W_o": uniform(n_classes, 2 * h + att_hidden, 2 * h + att_hidden),
            "b_o": Tensor2D(np.zeros((1, n_classes), dtype=dtype)),
            "W_ssl": uniform(d, h, h),
        }
        if embeddings is None:
            emb = rng.uniform(-0.05, 0.05, size=(vocab_size, d))
            emb[0] = 0
        else:
            emb = np.asarray(embeddings)
            if emb.shape != (vocab_size, d):
                raise ShapeError(f"embeddings are {emb.shape}, expected ({vocab_size}, {d})")
        tensors["E"] = Tensor2D(np.array(emb, dtype=dtype))
        return cls(tensors)

    # the two directions are views of one storage
    @property
    def W_f(self) -> Tensor2D:
        return self.W

    @property
    def W_b(self) -> Tensor2D:
        return self.W

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0, 0]))

    @property
    def dtype(self):
        return self.W.dtype

    def named(self):
        return [(name, getattr(self, name)) for name in PARAM_ORDER]

    def n_params(self) -> int:
        return sum(t.data.size for _, t in self.named())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: t.astype(dtype) for n, t in self.named()})

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor2D(t.data.copy()) for n, t in self.named()})

    def zero_grad(self) -> None:
        for _, t in self.named():
            t.zero_grad()

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            g = grads.get(name)
            if g is None:
                t.zero_grad()
            else:
                t.grad = np.asarray(g, dtype=t.dtype).reshape(t.shape).copy()

    def to_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in self.named())

    def is_finite(self) -> bool:
        return all(t.is_finite() for _, t in self.named())


# --------------------------------------------------------------------------
# single-step reference op


def elman_step(h_prev, x, W, b) -> np.ndarray:
    """``tanh(W [h_prev; x] + b)`` for one timestep."""
    W = W if isinstance(W, Tensor2D) else Tensor2D(W)
    hx = concat_vec(Tensor2D(np.ravel(h_prev)), Tensor2D(np.ravel(x)))
    if hx.cols != W.cols:
        raise ShapeError(f"elman_step: [h; x] has length {hx.cols}, W is {W.rows}x{W.cols}")
    return tanh_act(add(matmul(hx, transpose(W)), Tensor2D(np.ravel(b)))).data.reshape(-1)


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: np.ndarray      # (B, T) right-padded
    rev_ids: np.ndarray  # (B, T) each row's tokens reversed, right-padded
    lens: np.ndarray     # (B,)
    labels: np.ndarray   # (B,)
    mask: np.ndarray     # (T, B) float, 1 on real tokens

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def steps(self) -> int:
        return self.ids.shape[1]


def make_batch(examples: Sequence[TokenizedExample], pad_id: int = 0) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    lens = np.array([ex.true_len for ex in examples], dtype=np.int64)
    if (lens < 1).any():
        raise DegenerateInputError("sequence with true_len 0 has no tokens to process")
    T = int(lens.max())
    B = len(examples)
    ids = np.full((B, T), pad_id, dtype=np.int64)
    rev = np.full((B, T), pad_id, dtype=np.int64)
    for i, ex in enumerate(examples):
        toks = ex.ids[: ex.true_len]
        ids[i, : ex.true_len] = toks
        rev[i, : ex.true_len] = toks[::-1]
    mask = (np.arange(T)[:, None] < lens[None, :]).astype(np.float64)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(ids, rev, lens, labels, mask)


# --------------------------------------------------------------------------
# forward


@dataclass
class BatchTrace:
    batch: Batch
    Xf: np.ndarray       # (T, B, d)
    Xb: np.ndarray       # (T, B, d) reversed order
    Hf: np.ndarray       # (T, B, h) raw scan output
    G: np.ndarray        # (T, B, h) backward scan in processing order
    fused: np.ndarray    # (T, B, 2h) masked
    prev: np.ndarray     # (T, B, 2h) fused shifted one step
    s_raw: np.ndarray    # (T, B) unscaled attention scores
    A: np.ndarray        # (T, B)
    R: np.ndarray        # (T, B, h_att) refined per-step states
    pooled: np.ndarray   # (B, h_att)
    glob: np.ndarray     # (B, 2h)
    Y: np.ndarray        # (B, C)
    align: np.ndarray    # (T, B) index into G for each aligned position
    ssl_per_example: np.ndarray | None = None
    ssl_cache: tuple | None = None


def _scan_path(X, W, b, h, backend=None):
    pre = X @ W[:, h:].T + b.reshape(-1)
    return kernels.scan_forward(pre, W[:, :h], backend)


def _align_index(batch: Batch) -> np.ndarray:
    t = np.arange(batch.steps)[:, None]
    return np.clip(batch.lens[None, :] - 1 - t, 0, None)


def _realign(G: np.ndarray, align: np.ndarray, mask: np.ndarray) -> np.ndarray:
    B = G.shape[1]
    return G[align, np.arange(B)[None, :]] * mask[..., None]


def _masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 restricted to ``mask == 1``; masked entries get 0."""
    s = np.where(mask > 0, scores, -np.inf)
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s) * (mask > 0)
    return e / e.sum(axis=0, keepdims=True)


def backward_states(params: ModelParams, batch: Batch, backend=None):
    """Reversed-sequence embeddings and the backward-direction scan."""
    Xb = params.E.data[batch.rev_ids.T]
    G = _scan_path(Xb, params.W_b.data, params.b_b.data, params.hidden, backend)
    return Xb, G


def ssl_forward(params: ModelParams, batch: Batch, Xb: np.ndarray, G: np.ndarray):
    """Per-example next-reversed-embedding loss ``mean_s ||W_ssl G[s] - Xb[s+1]||^2``.

    Examples with fewer than two tokens contribute 0.
    """
    T, B = batch.steps, batch.size
    if T < 2:
        return np.zeros(B, dtype=G.dtype), None
    pred = G[:-1] @ params.W_ssl.data.T               # (T-1, B, d)
    diff = pred - Xb[1:]
    valid = (np.arange(T - 1)[:, None] < (batch.lens - 1)[None, :]).astype(G.dtype)
    denom = np.maximum(batch.lens - 1, 1).astype(G.dtype)
    per = (np.square(diff).sum(axis=-1) * valid).sum(axis=0) / denom
    return per, (diff, valid, denom)


def forward_batch(params: ModelParams, batch: Batch, with_ssl: bool = True,
                  backend=None, G_override: np.ndarray | None = None) -> BatchTrace:
    """Run the full graph on a batch.

    ``G_override`` replaces the backward-direction scan (used by test-time
    adaptation to inject adapted backward states).
    """
    h = params.hidden
    W = params.W_f.data
    mask = batch.mask.astype(W.dtype)
    Xf = params.E.data[batch.ids.T]
    Hf = _scan_path(Xf, W, params.b_f.data, h, backend)
    if G_override is None:
        Xb, G = backward_states(params, batch, backend)
    else:
        Xb, G = params.E.data[batch.rev_ids.T], G_override
    align = _align_index(batch)
    Hb = _realign(G, align, mask)
    fused = np.concatenate([Hf * mask[..., None], Hb], axis=-1)
    prev = np.zeros_like(fused)
    prev[1:] = fused[:-1]

    wa = params.W_a.data.reshape(-1)
    s_raw = fused @ wa[: 2 * h] + prev @ wa[2 * h:]
    A = _masked_softmax(params.alpha * s_raw, mask).astype(W.dtype)

    Wd = params.W_d.data
    R = np.tanh(fused @ Wd[:, : 2 * h].T + A[..., None] * Wd[:, 2 * h])
    pooled = (A[..., None] * R).sum(axis=0)

    B = batch.size
    last = batch.lens - 1
    glob = np.concatenate([Hf[last, np.arange(B)], G[last, np.arange(B)]], axis=-1)
    feat = np.concatenate([glob, pooled], axis=-1)
    logits = feat @ params.W_o.data.T + params.b_o.data
    Y = softmax_rows(logits)

    trace = BatchTrace(batch, Xf, Xb, Hf, G, fused, prev, s_raw, A, R, pooled, glob, Y, align)
    if with_ssl:
        trace.ssl_per_example, trace.ssl_cache = ssl_forward(params, batch, Xb, G)
    return trace


def batch_loss(trace: BatchTrace, ssl_weight: float = 0.0) -> float:
    """Mean cross-entropy plus ``ssl_weight`` times the mean auxiliary loss."""
    B = trace.batch.size
    p = trace.Y[np.arange(B), trace.batch.labels]
    ce = float(-np.log(np.maximum(p.astype(np.float64), 1e-12)).mean())
    if ssl_weight and trace.ssl_per_example is not None:
        ce += ssl_weight * float(trace.ssl_per_example.astype(np.float64).mean())
    return ce


# --------------------------------------------------------------------------
# backward


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum over leading axes of a[..., i] * b[..., j]``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _scatter_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """``out[ids[n]] += rows[n]`` with repeated ids accumulated."""
    ids = ids.reshape(-1)
    rows = rows.reshape(-1, rows.shape[-1])
    sel = sp.csr_matrix((np.ones(ids.size, dtype=rows.dtype), (ids, np.arange(ids.size))),
                        shape=(out.shape[0], ids.size))
    out += sel @ rows


def _ssl_backward(params, batch, Xb, G, cache, weight, grads, dG, embed_grad=True):
    diff, valid, denom = cache
    B = batch.size
    dpred = (2.0 * weight / B) * diff * (valid / denom)[..., None]   # (T-1, B, d)
    grads["W_ssl"] += _outer_sum(dpred, G[:-1])
    dG[:-1] += dpred @ params.W_ssl.data
    if embed_grad:
        _scatter_rows(grads["E"], batch.rev_ids.T[1:], -dpred)


def _scan_param_grads(params, X, H, dpre, ids, grads, which_bias, path_on, embed_grad=True):
    h = params.hidden
    W = params.W.data
    if path_on:
        Hprev = np.zeros_like(H)
        Hprev[1:] = H[:-1]
        grads["W"][:, :h] += _outer_sum(dpre, Hprev)
        grads["W"][:, h:] += _outer_sum(dpre, X)
    grads[which_bias] += dpre.sum(axis=(0, 1))[None, :]
    if embed_grad:
        _scatter_rows(grads["E"], ids, dpre @ W[:, h:])


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t.data) for name, t in params.named()}


def backward_batch(params: ModelParams, trace: BatchTrace, ssl_weight: float = 0.0,
                   paths: Sequence[str] = ("forward", "backward"), backend=None) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`batch_loss` w.r.t. every parameter.

    ``paths`` selects which directions contribute to the shared ``W``
    gradient; the default accumulates both.
    """
    batch = trace.batch
    B, T = batch.size, batch.steps
    h = params.hidden
    dt = params.dtype
    mask = batch.mask.astype(dt)
    grads = zero_grads(params)
    ar = np.arange(B)

    # classifier
    onehot = np.zeros_like(trace.Y)
    onehot[ar, batch.labels] = 1
    dlogits = (trace.Y - onehot) / B
    feat = np.concatenate([trace.glob, trace.pooled], axis=-1)
    grads["W_o"] += dlogits.T @ feat
    grads["b_o"] += dlogits.sum(axis=0)[None, :]
    dfeat = dlogits @ params.W_o.data
    dglob, dpooled = dfeat[:, : 2 * h], dfeat[:, 2 * h:]

    # attention-pooled refinement
    A, R = trace.A, trace.R
    dR = A[..., None] * dpooled[None]
    dA = (R * dpooled[None]).sum(axis=-1)
    dZ = dR * (1 - R * R)
    Wd = params.W_d.data
    grads["W_d"][:, : 2 * h] += _outer_sum(dZ, trace.fused)
    grads["W_d"][:, 2 * h] += A.reshape(-1) @ dZ.reshape(-1, dZ.shape[-1])
    dfused = dZ @ Wd[:, : 2 * h]
    dA += dZ @ Wd[:, 2 * h]

    # masked softmax and scores
    dscore = A * (dA - (A * dA).sum(axis=0, keepdims=True))
    alpha = params.alpha
    grads["log_alpha"] += alpha * float((dscore * trace.s_raw).sum())
    ds = alpha * dscore
    wa = params.W_a.data.reshape(-1)
    grads["W_a"][0, : 2 * h] += ds.reshape(-1) @ trace.fused.reshape(-1, 2 * h)
    grads["W_a"][0, 2 * h:] += ds.reshape(-1) @ trace.prev.reshape(-1, 2 * h)
    dfused += ds[..., None] * wa[: 2 * h]
    dprev = ds[..., None] * wa[2 * h:]
    dfused[:-1] += dprev[1:]
    dfused *= mask[..., None]

    # split back into the two directions
    dHf = np.ascontiguousarray(dfused[..., :h])
    dHb = dfused[..., h:]
    last = batch.lens - 1
    dHf[last, ar] += dglob[:, :h]
    dG = np.zeros_like(trace.G)
    tt, bb = np.nonzero(mask > 0)
    dG[trace.align[tt, bb], bb] = dHb[tt, bb]
    dG[last, ar] += dglob[:, h:]

    if ssl_weight and trace.ssl_cache is not None:
        _ssl_backward(params, batch, trace.Xb, trace.G, trace.ssl_cache, ssl_weight, grads, dG)

    W_h = params.W.data[:, :h]
    dpre_f = kernels.scan_backward(trace.Hf, dHf, W_h, backend)
    dpre_b = kernels.scan_backward(trace.G, dG, W_h, backend)
    _scan_param_grads(params, trace.Xf, trace.Hf, dpre_f, batch.ids.T, grads, "b_f", "forward" in paths)
    _scan_param_grads(params, trace.Xb, trace.G, dpre_b, batch.rev_ids.T, grads, "b_b", "backward" in paths)
    return grads


def ssl_loss_and_grads(params: ModelParams, batch: Batch, backend=None, embed_grad: bool = False):
    """Mean auxiliary loss over the batch and its gradients (backward path only)."""
    Xb, G = backward_states(params, batch, backend)
    per, cache = ssl_forward(params, batch, Xb, G)
    grads = zero_grads(params)
    if cache is None:
        return per, grads
    dG = np.zeros_like(G)
    _ssl_backward(params, batch, Xb, G, cache, 1.0, grads, dG, embed_grad=embed_grad)
    dpre = kernels.scan_backward(G, dG, params.W.data[:, : params.hidden], backend)
    _scan_param_grads(params, Xb, G, dpre, batch.rev_ids.T, grads, "b_b", True, embed_grad=embed_grad)
    return per, grads


# --------------------------------------------------------------------------
# single-example API


@dataclass
class ForwardTrace:
    H_f: np.ndarray          # (L, h)
    H_b: np.ndarray          # (L, h), aligned to original positions
    fused: np.ndarray        # (L, 2h)
    A: np.ndarray            # (L,)
    H_att_steps: np.ndarray  # (L, h_att)
    H_att: np.ndarray        # (h_att,)
    H_fusion: np.ndarray     # (2h,)
    Y: np.ndarray            # (C,)
    batch_trace: BatchTrace = field(repr=False)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.Y))


def _single(ex: TokenizedExample) -> Batch:
    return make_batch([ex])


def run_forward_path(ex: TokenizedExample, params: ModelParams, backend=None) -> np.ndarray:
    b = _single(ex)
    X = params.E.data[b.ids.T]
    return _scan_path(X, params.W_f.data, params.b_f.data, params.hidden, backend)[:, 0]


def run_backward_path(ex: TokenizedExample, params: ModelParams, backend=None) -> np.ndarray:
    b = _single(ex)
    _, G = backward_states(params, b, backend)
    return G[::-1, 0].copy()


def fuse(H_f: np.ndarray, H_b: np.ndarray):
    """Per-step ``[H_f[t]; H_b[t]]`` and the global ``[H_f[L]; H_b[1]]``."""
    if len(H_f) != len(H_b):
        raise ShapeError(f"fuse: {len(H_f)} forward states vs {len(H_b)} backward states")
    fused = np.concatenate([H_f, H_b], axis=-1)
    return fused, np.concatenate([H_f[-1], H_b[0]])


def attention_weights(fused: np.ndarray, mask, W_a, alpha: float) -> np.ndarray:
    mask = np.asarray(mask, dtype=fused.dtype).reshape(-1)
    if not mask.any():
        raise DegenerateInputError("attention over an all-masked sequence")
    W_a = np.asarray(getattr(W_a, "data", W_a)).reshape(-1)
    h2 = fused.shape[-1]
    f = fused * mask[:, None]
    prev = np.zeros_like(f)
    prev[1:] = f[:-1]
    scores = alpha * (f @ W_a[:h2] + prev @ W_a[h2:])
    return _masked_softmax(scores[:, None], mask[:, None])[:, 0]


def refine(fused: np.ndarray, A: np.ndarray, W_d):
    """Per-step ``tanh(W_d [fused_t; A_t])`` and their ``A``-weighted sum."""
    W_d = np.asarray(getattr(W_d, "data", W_d))
    h2 = fused.shape[-1]
    steps = np.tanh(fused @ W_d[:, :h2].T + A[:, None] * W_d[:, h2])
    return (A[:, None] * steps).sum(axis=0), steps


def classify(H_fusion: np.ndarray, H_att: np.ndarray, W_o, b_o) -> np.ndarray:
    W_o = np.asarray(getattr(W_o, "data", W_o))
    b_o = np.asarray(getattr(b_o, "data", b_o)).reshape(-1)
    logits = W_o @ np.concatenate([H_fusion, H_att]) + b_o
    return softmax_rows(logits[None])[0]


def _trace_from_batch(bt: BatchTrace) -> ForwardTrace:
    L = int(bt.batch.lens[0])
    h = bt.Hf.shape[-1]
    return ForwardTrace(
        H_f=bt.Hf[:L, 0],
        H_b=bt.fused[:L, 0, h:],
        fused=bt.fused[:L, 0],
        A=bt.A[:L, 0],
        H_att_steps=bt.R[:L, 0],
        H_att=bt.pooled[0],
        H_fusion=bt.glob[0],
        Y=bt.Y[0],
        batch_trace=bt,
    )


def forward(ex: TokenizedExample, params: ModelParams, backend=None, with_ssl: bool = True) -> ForwardTrace:
    return _trace_from_batch(forward_batch(params, _single(ex), with_ssl=with_ssl, backend=backend))


def backward(trace: ForwardTrace, label: int, params: ModelParams, ssl_weight: float = 0.0,
             paths: Sequence[str] = ("forward", "backward"), backend=None) -> dict[str, np.ndarray]:
    bt = trace.batch_trace
    bt.batch.labels = np.array([label], dtype=np.int64)
    return backward_batch(params, bt, ssl_weight=ssl_weight, paths=paths, backend=backend)


def predict_proba(params: ModelParams, examples: Sequence[TokenizedExample], batch_size: int = 64,
                  backend=None) -> np.ndarray:
    out = []
    for i in range(0, len(examples), batch_size):
        bt = forward_batch(params, make_batch(examples[i:i + batch_size]), with_ssl=False, backend=backend)
        out.append(bt.Y)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.n_classes))
