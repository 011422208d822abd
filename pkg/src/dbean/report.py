"""Classification reports, config fingerprints and JSON emission."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("World", "Sports", "Business", "Sci/Tech")


def fingerprint(config: dict) -> str:
    """Content hash of a JSON-serializable config (key order irrelevant)."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ClassificationReport:
    accuracy: float
    per_class_accuracy: list[float]
    confusion: list[list[int]]
    n_examples: int
    wall_clock_seconds: float = 0.0
    config_fingerprint: str = ""
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, labels, predictions, n_classes: int = 4, **kw) -> "ClassificationReport":
        labels = np.asarray(labels, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if labels.size == 0:
            raise ValueError("cannot report on an empty dataset")
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(conf, (labels, predictions), 1)
        row = conf.sum(axis=1)
        per_class = [float(conf[i, i] / row[i]) if row[i] else 0.0 for i in range(n_classes)]
        return cls(
            accuracy=float(np.trace(conf) / labels.size),
            per_class_accuracy=per_class,
            confusion=conf.tolist(),
            n_examples=int(labels.size),
            **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationReport":
        return cls(**d)

    def summary(self) -> str:
        name = self.extra.get("model", "model")
        return (f"{name}: accuracy {100 * self.accuracy:.2f}% on {self.n_examples} examples "
                f"[{self.config_fingerprint}] in {self.wall_clock_seconds:.1f}s")


def emit_report(report, path=None, stream=None, quiet=False) -> dict:
    """Write ``report`` as sorted-key JSON and print a one-line summary (stdout by default)."""
    d = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    if path is not None:
        Path(path).write_text(json.dumps(d, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if not quiet:
        stream = sys.stdout if stream is None else stream
        line = report.summary() if hasattr(report, "summary") else json.dumps(d, sort_keys=True)
        print(line, file=stream)
    return d
