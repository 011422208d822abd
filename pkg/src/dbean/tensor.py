"""Dense 2-D tensors with hand-written forward/backward primitives.

Every primitive returns a :class:`Tensor2D` and, when given a :class:`Tape`,
records a closure that pushes the output gradient back to its inputs. The
DBEAN graph is fixed, so the tape is a plain list replayed in reverse rather
than a general autodiff engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when a value that must be finite is not."""


class Tensor2D:
    """Row-major matrix of floats with an optional gradient buffer.

    Storage is float32 unless constructed from float64 data; gradient checking
    runs whole models in float64.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2D needs at most 2 dims, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        if grad is not None:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = grad

    @classmethod
    def zeros(cls, rows, cols, dtype=np.float32):
        return cls(np.zeros((rows, cols), dtype=dtype))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def astype(self, dtype) -> "Tensor2D":
        return Tensor2D(self.data.astype(dtype, copy=True))

    def copy(self) -> "Tensor2D":
        return Tensor2D(self.data.copy(), None if self.grad is None else self.grad.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        return f"Tensor2D({self.rows}x{self.cols}, {self.data.dtype})"


class Tape:
    """Records backward closures in execution order."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def backward(self, output: Tensor2D, seed=None) -> None:
        grad = output.ensure_grad()
        grad[...] = 1.0 if seed is None else seed
        for fn in reversed(self._ops):
            fn()

    def __len__(self) -> int:
        return len(self._ops)


def _as_tensor(x) -> Tensor2D:
    return x if isinstance(x, Tensor2D) else Tensor2D(x)


def matmul(a: Tensor2D, b: Tensor2D, tape: Tape | None = None) -> Tensor2D:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    out = Tensor2D(a.data @ b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            a.ensure_grad()[...] += g @ b.data.T
            b.ensure_grad()[...] += a.data.T @ g
        tape.record(backward)
    return out


def concat_vec(a: Tensor2D, b: Tensor2D, tape: Tape | None = None) -> Tensor2D:
    """Join two row vectors ``[a; b]``; backward splits the gradient."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.data.reshape(-1), b.data.reshape(-1)
    dtype = np.result_type(av.dtype, bv.dtype)
    out = Tensor2D(np.concatenate([av.astype(dtype), bv.astype(dtype)]).reshape(1, -1))
    n = av.size
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            g = g.reshape(-1)
            a.ensure_grad()[...] += g[:n].reshape(a.shape)
            b.ensure_grad()[...] += g[n:].reshape(b.shape)
        tape.record(backward)
    return out


def add(a: Tensor2D, b: Tensor2D, tape: Tape | None = None) -> Tensor2D:
    """Elementwise sum; ``b`` may be a row vector broadcast over rows (bias add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.shape != a.shape and not (b.rows == 1 and b.cols == a.cols):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor2D(a.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            a.ensure_grad()[...] += g
            b.ensure_grad()[...] += g.sum(axis=0, keepdims=True) if b.shape != a.shape else g
        tape.record(backward)
    return out


def transpose(a: Tensor2D, tape: Tape | None = None) -> Tensor2D:
    a = _as_tensor(a)
    out = Tensor2D(a.data.T)
    if tape is not None:
        def backward():
            if out.grad is not None:
                a.ensure_grad()[...] += out.grad.T
        tape.record(backward)
    return out


def tanh_act(x: Tensor2D, tape: Tape | None = None) -> Tensor2D:
    x = _as_tensor(x)
    out = Tensor2D(np.tanh(x.data))
    if tape is not None:
        def backward():
            if out.grad is not None:
                x.ensure_grad()[...] += out.grad * (1 - out.data * out.data)
        tape.record(backward)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vec(x: Tensor2D, tape: Tape | None = None) -> Tensor2D:
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ValueError("softmax of an empty vector")
    out = Tensor2D(softmax_rows(x.data.reshape(1, -1)).reshape(x.shape))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            y = out.data
            x.ensure_grad()[...] += y * (g - (g * y).sum())
        tape.record(backward)
    return out


def cross_entropy(probs: Tensor2D, label: int, tape: Tape | None = None) -> Tensor2D:
    """``-ln p[label]`` with the probability floored at 1e-12."""
    probs = _as_tensor(probs)
    p = probs.data.reshape(-1)
    if not 0 <= label < p.size:
        raise IndexError(f"label {label} out of range for {p.size} classes")
    if abs(float(p.sum()) - 1.0) > 1e-4:
        raise ValueError(f"probabilities sum to {float(p.sum())}, expected 1")
    pl = max(float(p[label]), PROB_FLOOR)
    out = Tensor2D(np.array([[-math.log(pl)]], dtype=probs.dtype))
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g = probs.ensure_grad().reshape(-1)
            if p[label] >= PROB_FLOOR:
                g[label] -= out.grad[0, 0] / p[label]
        tape.record(backward)
    return out


# Parameter containers (ModelParams, logistic regression) expose their tensors
# through ``named()``; plain dicts of Tensor2D work too.
def _named(params) -> list[tuple[str, Tensor2D]]:
    if hasattr(params, "named"):
        return list(params.named())
    if isinstance(params, Mapping):
        return list(params.items())
    return list(params)


def global_grad_norm(params) -> float:
    total = 0.0
    for _, t in _named(params):
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(total)


def sgd_step(params, lr: float, clip_norm: float | None = 5.0, skip: Iterable[str] = ()) -> float:
    """Clip gradients to ``clip_norm`` by global norm, then ``w -= lr * g``.

    Gradients are zeroed afterwards. Returns the pre-clip global norm. Names in
    ``skip`` are frozen: neither updated nor counted in the norm.
    """
    skip = set(skip)
    named = [(n, t) for n, t in _named(params) if n not in skip]
    for name, t in named:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    norm = global_grad_norm(named)
    scale = 1.0
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
    if lr != 0:
        step = lr * scale
        for _, t in named:
            if t.grad is not None:
                t.data -= (step * t.grad).astype(t.data.dtype)
    for _, t in named:
        t.zero_grad()
    return norm


@dataclass
class GradCheckReport:
    max_relative_error: float = 0.0
    worst_parameter: tuple[str, int] | None = None
    per_parameter_errors: list[tuple[str, float]] = field(default_factory=list)
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error <= tol


def relative_error(analytic, numeric, floor: float = 1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps zero gradients sane."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_grad_check(loss_fn, params, epsilon: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps each
    parameter name to an array of the parameter's shape. Parameters are
    perturbed in place and restored exactly.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    named = _named(params)
    report = GradCheckReport()
    if not named:
        return report
    _, analytic = loss_fn(params)
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    for name, t in named:
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = float(loss_fn(params)[0])
            flat[i] = orig - epsilon
            lm = float(loss_fn(params)[0])
            flat[i] = orig
            numeric[i] = (lp - lm) / (2 * epsilon)
        errs = relative_error(a_flat, numeric)
        report.n_checked += flat.size
        worst = float(errs.max()) if errs.size else 0.0
        report.per_parameter_errors.append((name, worst))
        if errs.size and worst >= report.max_relative_error:
            report.max_relative_error = worst
            report.worst_parameter = (name, int(errs.argmax()))
    return report
