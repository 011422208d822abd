"""Per-example test-time adaptation.

For each test sequence: compute forward-direction states with the trained
weights, snapshot the weights, take ``steps`` SGD steps on the label-free
auxiliary loss of the backward direction, recompute backward states with the
adapted weights, classify from original forward + adapted backward states,
then restore the snapshot byte-for-byte. The embedding table stays frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    ModelParams,
    backward_states,
    forward,
    forward_batch,
    make_batch,
    ssl_forward,
    ssl_loss_and_grads,
)
from .report import ClassificationReport
from .tensor import NumericError, sgd_step
from .text import TokenizedExample

FROZEN = ("E",)


@dataclass
class AdaptConfig:
    steps: int = 2
    lr: float = 0.05
    clip_norm: float = 5.0
    # halve lr (down to min_lr) until the auxiliary loss is non-increasing
    lr_search: bool = False
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


class ParamSnapshot:
    """Byte-exact copy of every adaptable parameter."""

    def __init__(self, params: ModelParams, frozen: Sequence[str] = FROZEN):
        self._arrays = {n: t.data.copy() for n, t in params.named() if n not in frozen}

    def restore(self, params: ModelParams) -> None:
        for name, arr in self._arrays.items():
            getattr(params, name).data[...] = arr

    def matches(self, params: ModelParams) -> bool:
        return all(getattr(params, n).data.tobytes() == a.tobytes() for n, a in self._arrays.items())


@dataclass
class AdaptTraceSummary:
    ssl_losses: list[float] = field(default_factory=list)
    lr_used: float = 0.0
    adapted: bool = False
    fallback: bool = False
    restored: bool = True

    @property
    def non_increasing(self) -> bool:
        return all(b <= a for a, b in zip(self.ssl_losses, self.ssl_losses[1:]))

    @property
    def ssl_delta(self) -> float:
        if len(self.ssl_losses) < 2:
            return 0.0
        return self.ssl_losses[0] - self.ssl_losses[-1]


def ssl_loss(ex: TokenizedExample, params: ModelParams, backend=None) -> float:
    """Auxiliary next-reversed-embedding loss; 0 for sequences shorter than 2."""
    batch = make_batch([ex])
    Xb, G = backward_states(params, batch, backend)
    per, _ = ssl_forward(params, batch, Xb, G)
    return float(per[0])


def _run_steps(params, batch, cfg, lr, backend):
    losses = []
    for _ in range(cfg.steps):
        per, grads = ssl_loss_and_grads(params, batch, backend)
        losses.append(float(per[0]))
        params.set_grads(grads)
        sgd_step(params, lr, cfg.clip_norm, skip=FROZEN)
    Xb, G = backward_states(params, batch, backend)
    per, _ = ssl_forward(params, batch, Xb, G)
    losses.append(float(per[0]))
    return losses, G


def adapt_and_classify(ex: TokenizedExample, params: ModelParams, cfg: AdaptConfig, backend=None):
    """Adapted class probabilities and a summary; ``params`` are left unchanged."""
    summary = AdaptTraceSummary(lr_used=cfg.lr)
    if cfg.steps == 0 or ex.true_len < 2:
        return forward(ex, params, backend=backend, with_ssl=False).Y, summary

    batch = make_batch([ex])
    snapshot = ParamSnapshot(params)
    lr = cfg.lr
    try:
        while True:
            losses, G = _run_steps(params, batch, cfg, lr, backend)
            ok = all(np.isfinite(losses))
            improving = ok and all(b <= a for a, b in zip(losses, losses[1:]))
            if improving or not cfg.lr_search or lr / 2 < cfg.min_lr:
                break
            snapshot.restore(params)
            lr /= 2
        if not ok or not np.isfinite(G).all():
            raise NumericError("non-finite adaptation loss")
        summary.ssl_losses, summary.lr_used, summary.adapted = losses, lr, True
        # forward-direction states are computed with the restored weights
        snapshot.restore(params)
        Y = forward_batch(params, batch, with_ssl=False, backend=backend, G_override=G).Y[0]
    except NumericError:
        snapshot.restore(params)
        summary.fallback = True
        Y = forward(ex, params, backend=backend, with_ssl=False).Y
    finally:
        params.zero_grad()
        snapshot.restore(params)
    summary.restored = snapshot.matches(params)
    return Y, summary


def adapt_evaluate(params: ModelParams, data: Sequence[TokenizedExample], cfg: AdaptConfig,
                   backend=None, **report_kw) -> ClassificationReport:
    """Adapted and un-adapted accuracy over ``data`` plus adaptation statistics."""
    if not data:
        raise ValueError("adapt_evaluate needs at least one example")
    t0 = time.perf_counter()
    before = params.to_bytes()
    base_preds, adapted_preds, deltas = [], [], []
    n_non_increasing = n_adapted = n_fallback = 0
    restored_every = True
    for ex in data:
        base_preds.append(int(np.argmax(forward(ex, params, backend=backend, with_ssl=False).Y)))
        Y, s = adapt_and_classify(ex, params, cfg, backend=backend)
        adapted_preds.append(int(np.argmax(Y)))
        restored_every &= s.restored
        n_fallback += s.fallback
        if s.adapted:
            n_adapted += 1
            n_non_increasing += s.non_increasing
            deltas.append(s.ssl_delta)
    labels = [ex.label for ex in data]
    report = ClassificationReport.from_predictions(labels, adapted_preds, **report_kw)
    base = ClassificationReport.from_predictions(labels, base_preds)
    report.extra.update({
        "model": "DBEAN+TTT",
        "adapted_accuracy": report.accuracy,
        "base_accuracy": base.accuracy,
        "mean_ssl_delta": float(np.mean(deltas)) if deltas else 0.0,
        "n_adapted": n_adapted,
        "n_fallback": n_fallback,
        "non_increasing_fraction": n_non_increasing / n_adapted if n_adapted else 1.0,
        "restore_verified": bool(restored_every and params.to_bytes() == before),
        "steps": cfg.steps,
        "lr": cfg.lr,
    })
    report.wall_clock_seconds = time.perf_counter() - t0
    return report
