"""Raw text to fixed-length token ids: cleaning, BPE, padding, embeddings."""

from __future__ import annotations

import heapq
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

MAX_LEN = 512
PAD, UNK = "<pad>", "<unk>"
# Marks the first symbol of every word so word boundaries survive decoding.
WORD_START = "▁"
VOCAB_MAGIC = "DBEAN-VOCAB-1"
MERGES_HEADER = "#merges"


class DataError(ValueError):
    """Malformed input data (files, records, vocabularies)."""


def clean_text(raw: str) -> str:
    """Strip ``<...>`` tag spans, lowercase, and collapse whitespace.

    Each tag becomes a single space so adjacent text does not fuse. An
    unclosed ``<`` drops everything after it.
    """
    out = []
    i, n = 0, len(raw)
    while i < n:
        c = raw[i]
        if c == "<":
            j = raw.find(">", i + 1)
            if j < 0:
                break
            out.append(" ")
            i = j + 1
            continue
        out.append(c)
        i += 1
    return " ".join("".join(out).lower().split())


@dataclass
class Vocabulary:
    id_to_token: list[str]
    merges: list[tuple[str, str]]
    pad_id: int = 0
    unk_id: int = 1

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")
        if self.pad_id == self.unk_id:
            raise DataError("pad and unk ids must differ")
        self.merge_ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def save(self, path) -> None:
        lines = [VOCAB_MAGIC]
        lines += [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        lines.append(MERGES_HEADER)
        lines += [f"{a}\t{b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or lines[0] != VOCAB_MAGIC:
            raise DataError(f"{path}: not a vocabulary file (missing {VOCAB_MAGIC})")
        tokens: list[str] = []
        merges: list[tuple[str, str]] = []
        in_merges = False
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            if line == MERGES_HEADER:
                in_merges = True
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two tab-separated fields")
            if in_merges:
                merges.append((parts[0], parts[1]))
            else:
                if int(parts[1]) != len(tokens):
                    raise DataError(f"{path}:{lineno}: ids must be dense and ordered")
                tokens.append(parts[0])
        return cls(tokens, merges, tokens.index(PAD), tokens.index(UNK))

    def decode(self, ids) -> str:
        text = "".join(self.id_to_token[i] for i in ids
                       if i not in (self.pad_id, self.unk_id))
        return text.replace(WORD_START, " ").strip()


def _word_symbols(word: str) -> list[str]:
    return [WORD_START] + list(word)


def bpe_train(corpus: Iterable[str], num_merges: int = 10_000) -> Vocabulary:
    """Learn ``num_merges`` BPE merges from cleaned text.

    The most frequent adjacent pair wins; ties go to the lexicographically
    smallest pair. Stops early when no pair occurs.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq = Counter()
    for text in corpus:
        word_freq.update(text.split())
    words = [_word_symbols(w) for w in sorted(word_freq)]
    freqs = [word_freq[w] for w in sorted(word_freq)]

    chars = sorted({s for w in words for s in w})
    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[wi]
            pair_words[pair].add(wi)

    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or neg == 0:
            continue  # stale heap entry
        merges.append(pair)
        a, b = pair
        merged = a + b
        touched: dict[tuple[str, str], int] = {}
        for wi in sorted(pair_words.pop(pair, ())):
            syms, f = words[wi], freqs[wi]
            for p in zip(syms, syms[1:]):
                pair_counts[p] -= f
                touched[p] = pair_counts[p]
            new, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    new.append(merged)
                    i += 2
                else:
                    new.append(syms[i])
                    i += 1
            words[wi] = new
            for p in zip(new, new[1:]):
                pair_counts[p] += f
                pair_words[p].add(wi)
                touched[p] = pair_counts[p]
        pair_counts.pop(pair, None)
        for p, c in touched.items():
            if p == pair:
                continue
            if c <= 0:
                pair_counts.pop(p, None)
            else:
                heapq.heappush(heap, (-c, p))

    tokens = [PAD, UNK] + chars
    seen = set(tokens)
    for a, b in merges:
        if a + b not in seen:
            seen.add(a + b)
            tokens.append(a + b)
    return Vocabulary(tokens, merges, 0, 1)


def _encode_word(word: str, vocab: Vocabulary) -> list[int]:
    cached = vocab._cache.get(word)
    if cached is not None:
        return cached
    syms = _word_symbols(word)
    ranks = vocab.merge_ranks
    while len(syms) > 1:
        best, best_rank = None, None
        for p in zip(syms, syms[1:]):
            r = ranks.get(p)
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = p, r
        if best is None:
            break
        a, b = best
        new, i = [], 0
        while i < len(syms):
            if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                new.append(a + b)
                i += 2
            else:
                new.append(syms[i])
                i += 1
        syms = new
    ids = [vocab.token_to_id.get(s, vocab.unk_id) for s in syms]
    if len(vocab._cache) < 500_000:
        vocab._cache[word] = ids
    return ids


def bpe_encode(text: str, vocab: Vocabulary) -> list[int]:
    """Encode cleaned text, applying merges in training order within each word."""
    ids: list[int] = []
    for word in text.split():
        ids.extend(_encode_word(word, vocab))
    return ids


@dataclass
class TokenizedExample:
    ids: np.ndarray
    true_len: int
    label: int

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.ids.shape[0], dtype=np.int8)
        m[: self.true_len] = 1
        return m

    @property
    def tokens(self) -> np.ndarray:
        """The unpadded id sequence."""
        return self.ids[: self.true_len]


def pad_truncate(ids, label: int = 0, max_len: int = MAX_LEN, pad_id: int = 0) -> TokenizedExample:
    ids = list(ids)[:max_len]
    arr = np.full(max_len, pad_id, dtype=np.int32)
    arr[: len(ids)] = ids
    return TokenizedExample(arr, len(ids), int(label))


def encode_example(text: str, label: int, vocab: Vocabulary, max_len: int = MAX_LEN) -> TokenizedExample:
    return pad_truncate(bpe_encode(clean_text(text), vocab), label, max_len, vocab.pad_id)


def iter_word2vec(path, dim: int, wanted=None):
    """Yield ``(word, float32 vector)`` from a word2vec text file.

    An optional ``count dim`` header is checked against ``dim``. Every line is
    width-checked; only words in ``wanted`` (if given) are parsed and yielded.
    """
    with open(path, encoding="utf-8", errors="strict") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                if int(parts[1]) != dim:
                    raise DataError(f"{path}: embedding dim mismatch, expected {dim}, found {parts[1]}")
                continue
            if parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: embedding dim mismatch, expected {dim}, "
                                f"found {len(parts) - 1}")
            if wanted is not None and parts[0] not in wanted:
                continue
            try:
                vec = np.array(parts[1:], dtype=np.float32)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable vector ({exc})") from None
            if not np.isfinite(vec).all():
                raise DataError(f"{path}:{lineno}: non-finite value")
            yield parts[0], vec


def load_word_vectors(path, words, dim: int = 300) -> tuple[list[str], np.ndarray]:
    """Vectors for the subset of ``words`` present in the file, in ``words`` order."""
    found = dict(iter_word2vec(path, dim, wanted=set(words)))
    kept = [w for w in words if w in found]
    mat = np.stack([found[w] for w in kept]) if kept else np.zeros((0, dim), dtype=np.float32)
    return kept, mat


def load_word2vec_text(path, vocab: Vocabulary, dim: int = 300, seed: int = 0,
                       oov_init_scale: float = 0.05) -> np.ndarray:
    """Build a ``len(vocab) x dim`` embedding matrix from a word2vec text file.

    BPE tokens are matched on their surface form (word-start marker removed).
    Unmatched rows keep a seeded uniform(-scale, scale) draw; the pad row is zero.
    """
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-oov_init_scale, oov_init_scale, size=(len(vocab), dim)).astype(np.float32)
    emb[vocab.pad_id] = 0
    by_surface: dict[str, list[int]] = defaultdict(list)
    for i, tok in enumerate(vocab.id_to_token):
        if i in (vocab.pad_id, vocab.unk_id):
            continue
        surface = tok.replace(WORD_START, "")
        if surface:
            by_surface[surface].append(i)

    matched = 0
    for word, vec in iter_word2vec(path, dim, wanted=by_surface):
        rows = by_surface[word]
        emb[rows] = vec
        matched += len(rows)
    log.info("word2vec: %d of %d vocabulary rows initialized from %s", matched, len(vocab), path)
    return emb


def random_embeddings(vocab_size: int, dim: int, seed: int = 0, scale: float = 0.05,
                      pad_id: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-scale, scale, size=(vocab_size, dim)).astype(np.float32)
    emb[pad_id] = 0
    return emb
