"""AG News records: CSV loading, class-balanced subsampling, synthetic corpora."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .report import CLASS_NAMES
from .text import DataError

# official split sizes: (total, per class)
SPLIT_SIZES = {"train": (120_000, 30_000), "test": (7_600, 1_900)}


@dataclass(frozen=True)
class AgNewsRecord:
    label: int
    title: str
    description: str

    @property
    def text(self) -> str:
        return f"{self.title} {self.description}"

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.label]


def load_agnews_csv(path, strict: bool = False, split: str | None = None) -> list[AgNewsRecord]:
    """Read ``"<1..4>","<title>","<description>"`` rows; labels become 0-based.

    With ``strict`` the record and per-class counts must match an official
    split (``split`` names it; otherwise either split is accepted).
    """
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, strict=True)
        row_no = 0
        try:
            for row_no, row in enumerate(reader, start=1):
                if not row:
                    continue
                if len(row) != 3:
                    raise DataError(f"{path}: row {row_no}: expected 3 fields, got {len(row)}")
                try:
                    label = int(row[0])
                except ValueError:
                    raise DataError(f"{path}: row {row_no}: label {row[0]!r} is not an integer") from None
                if not 1 <= label <= 4:
                    raise DataError(f"{path}: row {row_no}: label {label} outside 1..4")
                records.append(AgNewsRecord(label - 1, row[1], row[2]))
        except csv.Error as exc:
            raise DataError(f"{path}: row {row_no + 1}: malformed quoting ({exc})") from None
    if strict:
        _validate_counts(path, records, split)
    return records


def _validate_counts(path, records, split):
    counts = Counter(r.label for r in records)
    candidates = [split] if split else list(SPLIT_SIZES)
    for name in candidates:
        total, per_class = SPLIT_SIZES[name]
        if len(records) == total and all(counts[c] == per_class for c in range(4)):
            return
    want = ", ".join(f"{n}: {SPLIT_SIZES[n][0]} ({SPLIT_SIZES[n][1]}/class)" for n in candidates)
    got = [counts[c] for c in range(4)]
    raise DataError(f"{path}: strict count check failed, found {len(records)} records {got}; expected {want}")


def write_agnews_csv(records: Sequence[AgNewsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_ALL, lineterminator="\n")
        for r in records:
            w.writerow([r.label + 1, r.title, r.description])


def subsample(records: Sequence[AgNewsRecord], per_class: int, seed: int = 0) -> list[AgNewsRecord]:
    """Seeded class-balanced subset; records keep their original relative order."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {c: [] for c in range(4)}
    for i, r in enumerate(records):
        by_class[r.label].append(i)
    chosen = []
    for c in range(4):
        idx = by_class[c]
        if len(idx) < per_class:
            raise DataError(f"class {CLASS_NAMES[c]} has {len(idx)} records, need {per_class}")
        chosen.extend(np.asarray(idx)[rng.permutation(len(idx))[:per_class]].tolist())
    return [records[i] for i in sorted(chosen)]


def find_agnews(directory) -> tuple[Path, Path] | None:
    """``(train.csv, test.csv)`` under ``directory`` if both exist."""
    if not directory:
        return None
    d = Path(directory)
    train, test = d / "train.csv", d / "test.csv"
    return (train, test) if train.is_file() and test.is_file() else None


# --------------------------------------------------------------------------
# synthetic corpus


def _pseudo_words(rng, n, lo=3, hi=9):
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    words = set()
    while len(words) < n:
        words.add("".join(rng.choice(letters, size=int(rng.integers(lo, hi)))))
    return sorted(words)


def synthetic_agnews(per_class: int, seed: int = 0, topic_words: int = 120, shared_words: int = 600,
                     topic_rate: float = 0.25, confuse_rate: float = 0.08,
                     length=(12, 48), lexicon_seed: int = 0) -> list[AgNewsRecord]:
    """A four-topic corpus in AG News shape for tests and smoke runs.

    Each document mixes Zipf-distributed shared words with words from its
    class topic and a few from other topics, so classes overlap but are
    learnable. Titles occasionally carry markup to exercise cleaning. The
    lexicon depends only on ``lexicon_seed``, so splits drawn with different
    ``seed`` values share vocabulary and topics.
    """
    lex = np.random.default_rng(lexicon_seed)
    vocab = _pseudo_words(lex, shared_words + 4 * topic_words)
    order = lex.permutation(len(vocab))
    rng = np.random.default_rng(seed)
    shared = [vocab[i] for i in order[:shared_words]]
    topics = [[vocab[i] for i in order[shared_words + c * topic_words: shared_words + (c + 1) * topic_words]]
              for c in range(4)]
    zipf_shared = 1.0 / np.arange(1, shared_words + 1)
    zipf_shared /= zipf_shared.sum()
    zipf_topic = 1.0 / np.arange(1, topic_words + 1) ** 0.8
    zipf_topic /= zipf_topic.sum()

    records = []
    for c in range(4):
        for _ in range(per_class):
            n = int(rng.integers(length[0], length[1] + 1))
            u = rng.random(n)
            topic_pick = rng.choice(topic_words, size=n, p=zipf_topic)
            shared_pick = rng.choice(shared_words, size=n, p=zipf_shared)
            other = (c + rng.integers(1, 4, size=n)) % 4
            words = []
            for i in range(n):
                if u[i] < topic_rate:
                    words.append(topics[c][topic_pick[i]])
                elif u[i] < topic_rate + confuse_rate:
                    words.append(topics[other[i]][topic_pick[i]])
                else:
                    words.append(shared[shared_pick[i]])
            cut = max(2, n // 4)
            title = " ".join(words[:cut]).title()
            if rng.random() < 0.2:
                title = f"<b>{title}</b>"
            records.append(AgNewsRecord(c, title, " ".join(words[cut:])))
    perm = rng.permutation(len(records))
    return [records[i] for i in perm]
