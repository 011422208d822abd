"""Mini-batch SGD training, evaluation and checkpointing for DBEAN."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ModelParams, backward_batch, batch_loss, forward_batch, make_batch, predict_proba
from .report import ClassificationReport, fingerprint
from .tensor import NumericError, Tensor2D, sgd_step
from .text import TokenizedExample

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DBEAN-CKPT-1\n"
CKPT_VERSION = "DBEAN-CKPT-1"


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr_initial: float = 0.5
    lr_decay: float = 0.9
    clip_norm: float = 1.0
    seed: int = 0
    ssl_weight: float = 0.1
    hidden: int = 128
    att_hidden: int = 64
    embed_dim: int = 300
    max_len: int = 512
    num_merges: int = 10_000

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise ValueError("lr_initial must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.ssl_weight < 0:
            raise ValueError("ssl_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainState:
    """Parameters plus everything needed to resume training exactly.

    ``current_lr`` is the rate the next epoch will use:
    ``lr_initial * lr_decay ** epoch`` with ``epoch`` completed epochs.
    """

    params: ModelParams
    config: TrainConfig
    epoch: int = 0
    current_lr: float = 0.0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainConfig, vocab_size: int, embeddings=None) -> "TrainState":
        params = ModelParams.init(vocab_size, embed_dim=config.embed_dim, hidden=config.hidden,
                                  att_hidden=config.att_hidden, seed=config.seed, embeddings=embeddings)
        return cls(params, config, 0, config.lr_initial, np.random.default_rng(config.seed + 1))


@dataclass
class EpochSummary:
    epoch: int
    lr: float
    mean_loss: float
    train_accuracy: float
    seconds: float


def final_learning_rate(config: TrainConfig) -> float:
    """Rate in effect during the last training epoch."""
    if config.epochs < 1:
        raise ValueError("final learning rate undefined for 0 epochs")
    return config.lr_initial * config.lr_decay ** (config.epochs - 1)


def train_epoch(state: TrainState, data: Sequence[TokenizedExample], backend=None) -> EpochSummary:
    if not data:
        raise ValueError("train_epoch needs at least one example")
    cfg = state.config
    params = state.params
    t0 = time.perf_counter()
    order = state.rng.permutation(len(data))
    lr = state.current_lr
    losses, correct = [], 0
    for bi, start in enumerate(range(0, len(data), cfg.batch_size)):
        batch = make_batch([data[i] for i in order[start:start + cfg.batch_size]])
        trace = forward_batch(params, batch, with_ssl=cfg.ssl_weight > 0, backend=backend)
        loss = batch_loss(trace, cfg.ssl_weight)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {state.epoch} batch {bi}")
        correct += int((trace.Y.argmax(axis=1) == batch.labels).sum())
        params.set_grads(backward_batch(params, trace, cfg.ssl_weight, backend=backend))
        sgd_step(params, lr, cfg.clip_norm)
        losses.append(loss)
        state.loss_history.append(loss)
    state.epoch += 1
    state.current_lr = cfg.lr_initial * cfg.lr_decay ** state.epoch
    return EpochSummary(state.epoch, lr, float(np.mean(losses)), correct / len(data),
                        time.perf_counter() - t0)


def fit(state: TrainState, data: Sequence[TokenizedExample], epochs: int | None = None,
        log_path=None, stop_at_accuracy: float | None = None, backend=None) -> list[EpochSummary]:
    """Run ``epochs`` epochs (config default), appending JSON metric lines to ``log_path``.

    With ``stop_at_accuracy``, training halts once a full evaluation of the
    training data reaches that accuracy.
    """
    summaries = []
    for _ in range(state.config.epochs if epochs is None else epochs):
        s = train_epoch(state, data, backend=backend)
        record = asdict(s)
        if stop_at_accuracy is not None:
            record["eval_train_accuracy"] = evaluate(state.params, data, backend=backend).accuracy
        log.info("epoch %d lr %.5g loss %.4f train acc %.4f", s.epoch, s.lr, s.mean_loss, s.train_accuracy)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        summaries.append(s)
        if stop_at_accuracy is not None and record["eval_train_accuracy"] >= stop_at_accuracy:
            break
    return summaries


def evaluate(params: ModelParams | None, data: Sequence[TokenizedExample],
             predict_fn: Callable[[Sequence[TokenizedExample]], np.ndarray] | None = None,
             batch_size: int = 64, backend=None, **report_kw) -> ClassificationReport:
    """Accuracy and confusion matrix; ``predict_fn`` overrides the model."""
    if not data:
        raise ValueError("evaluate needs at least one example")
    t0 = time.perf_counter()
    if predict_fn is None:
        preds = predict_proba(params, data, batch_size, backend=backend).argmax(axis=1)
    else:
        preds = np.asarray(predict_fn(data))
    labels = [ex.label for ex in data]
    report = ClassificationReport.from_predictions(labels, preds, **report_kw)
    report.wall_clock_seconds = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# checkpoints: magic line, one JSON header line, raw little-endian payload


def save_checkpoint(state: TrainState, path) -> None:
    params = state.params
    header = {
        "version": CKPT_VERSION,
        "dtype": "float32",
        "params": [[name, list(t.shape)] for name, t in params.named()],
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "config_fingerprint": fingerprint(state.config.to_dict()),
        "epoch": state.epoch,
        "current_lr": state.current_lr,
        "rng_state": state.rng.bit_generator.state,
        "loss_history": state.loss_history,
    }
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in params.named())
    header["payload_bytes"] = len(payload)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a {CKPT_VERSION} checkpoint")
    rest = raw[len(CKPT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    payload = rest[nl + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    tensors, offset = {}, 0
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        tensors[name] = Tensor2D(arr.astype(np.float32))
        offset += n
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(ModelParams(tensors), TrainConfig.from_dict(header["config"]), header["epoch"],
                      header["current_lr"], rng, list(header["loss_history"]))
