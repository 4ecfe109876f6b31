"""Dataset plumbing: TSV ingestion, text cleanup, hash-bucket vocabulary,
seeded splits, batch loaders, and synthetic desk-scale task generators.

The synthetic tasks plant an exact token-level signal: sentiment is a
deterministic function of which planted token group appears, paraphrase labels
follow a token-overlap threshold, and similarity scores are Jaccard overlap
scaled to [0, 5]. A small encoder can learn all three quickly, which keeps
benchmark runs meaningful at desk scale.
"""
from __future__ import annotations

import csv
import hashlib
import re
import warnings
from typing import NamedTuple

import numpy as np


class SstExample(NamedTuple):
    sentence: str
    label: int


class PairExample(NamedTuple):
    sentence1: str
    sentence2: str
    label: float


TASKS = ("sst", "para", "sts")

_KEEP = re.compile(r"[^A-Za-z0-9\s.,;:!?'\"()-]")
_SPACE = re.compile(r"\s+")


def clean_text(s: str) -> str:
    """Strip characters outside letters/digits/basic punctuation and collapse
    whitespace runs."""
    return _SPACE.sub(" ", _KEEP.sub("", s)).strip()


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocab:
    """Deterministic hash-bucket vocabulary. No fitting step: any word maps to
    a stable id, so train/dev/test need no shared state."""

    PAD, UNK, CLS = 0, 1, 2
    RESERVED = 3

    def __init__(self, size: int = 4096):
        if size <= self.RESERVED:
            raise ValueError(f"vocab size must exceed {self.RESERVED}, got {size}")
        self.size = int(size)

    def word_id(self, word: str) -> int:
        if not word:
            return self.UNK
        digest = hashlib.md5(word.encode("utf-8")).hexdigest()
        return self.RESERVED + int(digest, 16) % (self.size - self.RESERVED)

    def encode(self, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """[CLS] + hashed tokens, truncated/padded to max_len; mask marks real
        positions."""
        words = clean_text(text).lower().split()
        ids = [self.CLS] + [self.word_id(w) for w in words]
        ids = ids[:max_len]
        mask = np.zeros(max_len, dtype=np.float32)
        mask[: len(ids)] = 1.0
        padded = np.full(max_len, self.PAD, dtype=np.int64)
        padded[: len(ids)] = ids
        return padded, mask


# ---------------------------------------------------------------------------
# TSV ingestion
# ---------------------------------------------------------------------------

_COLUMNS = {
    "sst": ("sentence", "sentiment"),
    "para": ("sentence1", "sentence2", "is_duplicate"),
    "sts": ("sentence1", "sentence2", "similarity"),
}


def _parse_row(task: str, row: dict):
    if task == "sst":
        text = clean_text(row["sentence"] or "")
        label = int(row["sentiment"])
        if not text or not 0 <= label <= 4:
            return None
        return SstExample(text, label)
    s1 = clean_text(row["sentence1"] or "")
    s2 = clean_text(row["sentence2"] or "")
    if not s1 or not s2:
        return None
    if task == "para":
        label = int(row["is_duplicate"])
        if label not in (0, 1):
            return None
        return PairExample(s1, s2, float(label))
    score = float(row["similarity"])
    if not 0.0 <= score <= 5.0:
        return None
    return PairExample(s1, s2, score)


def load_tsv(path, task: str) -> list:
    """Parse a tab-separated file by header names; malformed rows are skipped
    with a counted warning."""
    if task == "quora":
        task = "para"
    if task not in _COLUMNS:
        raise ValueError(f"unknown task {task!r}; choose one of {TASKS}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f, delimiter="\t")
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        missing = set(_COLUMNS[task]) - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing required columns {sorted(missing)}")
        examples, skipped = [], 0
        for row in reader:
            try:
                parsed = _parse_row(task, row)
            except (TypeError, ValueError):
                parsed = None
            if parsed is None:
                skipped += 1
            else:
                examples.append(parsed)
    if skipped:
        warnings.warn(f"{path}: skipped {skipped} malformed rows")
    return examples


# ---------------------------------------------------------------------------
# synthetic desk-scale tasks
# ---------------------------------------------------------------------------

_NUM_CLASSES = 5
_GROUP_WORDS = 12
_FILLERS = [f"blah{i}" for i in range(40)]
_CONTENT = [f"w{i}" for i in range(200)]
_SENTIMENT_GROUPS = [[f"sent{g}tok{i}" for i in range(_GROUP_WORDS)]
                     for g in range(_NUM_CLASSES)]

OVERLAP_THRESHOLD = 0.5


def _jaccard(s1: str, s2: str) -> float:
    a, b = set(s1.split()), set(s2.split())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def pair_label(s1: str, s2: str) -> float:
    """Planted paraphrase rule: duplicate iff token Jaccard >= threshold."""
    return float(_jaccard(s1, s2) >= OVERLAP_THRESHOLD)


def pair_score(s1: str, s2: str) -> float:
    """Planted similarity rule: token Jaccard scaled to [0, 5]."""
    return 5.0 * _jaccard(s1, s2)


def _sst_sentence(rng: np.random.Generator, label: int) -> str:
    signal = rng.choice(_SENTIMENT_GROUPS[label], size=rng.integers(3, 6), replace=False)
    filler = rng.choice(_FILLERS, size=rng.integers(3, 7), replace=False)
    words = np.concatenate([signal, filler])
    rng.shuffle(words)
    return " ".join(words)


def _content_sentence(rng: np.random.Generator, words=None, length: int = 8) -> str:
    if words is None:
        words = rng.choice(_CONTENT, size=length, replace=False)
    words = np.array(words, dtype=object)
    rng.shuffle(words)
    return " ".join(words)


def _pair_with_shared(rng: np.random.Generator, shared: int, length: int = 8):
    base = rng.choice(_CONTENT, size=length, replace=False)
    rest = [w for w in _CONTENT if w not in set(base)]
    fresh = rng.choice(rest, size=length - shared, replace=False)
    other = np.concatenate([base[:shared], fresh])
    return _content_sentence(rng, base), _content_sentence(rng, other)


def synth_tasks(seed: int, sizes: dict[str, int] | None = None) -> dict[str, list]:
    """Generate the three synthetic datasets from one seed."""
    sizes = dict(sizes or {})
    for task in TASKS:
        sizes.setdefault(task, 256)
        if sizes[task] < 10:
            raise ValueError(f"{task} size must be >= 10, got {sizes[task]}")
    rng = np.random.default_rng(seed)

    sst = [SstExample(_sst_sentence(rng, label), label)
           for label in rng.integers(0, _NUM_CLASSES, size=sizes["sst"])]

    para = []
    for i in range(sizes["para"]):
        if i % 2 == 0:
            # near-duplicate: swap out at most a quarter of the tokens
            s1, s2 = _pair_with_shared(rng, shared=int(rng.integers(6, 9)))
        else:
            s1, s2 = _pair_with_shared(rng, shared=int(rng.integers(0, 3)))
        para.append(PairExample(s1, s2, pair_label(s1, s2)))

    sts = []
    for i in range(sizes["sts"]):
        shared = int(rng.integers(0, 9))
        s1, s2 = _pair_with_shared(rng, shared=shared)
        if shared == 8:
            s2 = s1  # identical pair, score exactly 5.0
        sts.append(PairExample(s1, s2, pair_score(s1, s2)))

    return {"sst": sst, "para": para, "sts": sts}


def split_examples(examples: list, seed: int,
                   fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> dict[str, list]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_train = int(round(fractions[0] * len(examples)))
    n_dev = int(round(fractions[1] * len(examples)))
    picks = {
        "train": order[:n_train],
        "dev": order[n_train:n_train + n_dev],
        "test": order[n_train + n_dev:],
    }
    return {name: [examples[i] for i in idx] for name, idx in picks.items()}


# ---------------------------------------------------------------------------
# batch loader
# ---------------------------------------------------------------------------

class Loader:
    """Pre-encoded batches over one task's examples. Shuffle order is a pure
    function of (seed, epoch), so runs replay exactly."""

    def __init__(self, examples: list, vocab: Vocab, task: str, batch_size: int,
                 max_len: int = 16, seed: int = 0, shuffle: bool = True):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.task = task
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.shuffle = shuffle
        self._epoch = 0
        n = len(examples)
        if task == "sst":
            enc = [vocab.encode(ex.sentence, max_len) for ex in examples]
            self.ids = np.stack([e[0] for e in enc]) if n else np.zeros((0, max_len), np.int64)
            self.mask = np.stack([e[1] for e in enc]) if n else np.zeros((0, max_len), np.float32)
            self.labels = np.array([ex.label for ex in examples], dtype=np.int64)
        else:
            enc1 = [vocab.encode(ex.sentence1, max_len) for ex in examples]
            enc2 = [vocab.encode(ex.sentence2, max_len) for ex in examples]
            shape = (0, max_len)
            self.ids1 = np.stack([e[0] for e in enc1]) if n else np.zeros(shape, np.int64)
            self.mask1 = np.stack([e[1] for e in enc1]) if n else np.zeros(shape, np.float32)
            self.ids2 = np.stack([e[0] for e in enc2]) if n else np.zeros(shape, np.int64)
            self.mask2 = np.stack([e[1] for e in enc2]) if n else np.zeros(shape, np.float32)
            self.labels = np.array([ex.label for ex in examples], dtype=np.float32)

    def __len__(self) -> int:
        return -(-len(self.labels) // self.batch_size)

    def set_epoch(self, epoch: int) -> None:
        self._epoch = int(epoch)

    def _order(self) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.labels))
        return np.random.default_rng((self.seed, self._epoch)).permutation(len(self.labels))

    def __iter__(self):
        order = self._order()
        for start in range(0, len(order), self.batch_size):
            pick = order[start:start + self.batch_size]
            if self.task == "sst":
                yield self.ids[pick], self.mask[pick], self.labels[pick]
            else:
                yield (self.ids1[pick], self.mask1[pick],
                       self.ids2[pick], self.mask2[pick], self.labels[pick])


def make_loaders(datasets: dict[str, dict[str, list]], vocab: Vocab, batch_size: int,
                 max_len: int = 16, seed: int = 0) -> dict[str, dict[str, Loader]]:
    """datasets: {split: {task: examples}} -> {split: {task: Loader}}; only the
    train split shuffles."""
    out = {}
    for split, per_task in datasets.items():
        out[split] = {
            task: Loader(examples, vocab, task, batch_size, max_len=max_len,
                         seed=seed, shuffle=split == "train")
            for task, examples in per_task.items()
        }
    return out


def desk_data(seed: int = 0, n_per_task: int = 256, batch_size: int = 32,
              vocab_size: int = 4096, max_len: int = 16):
    """Synthetic datasets, split 80/10/10, encoded into loaders."""
    raw = synth_tasks(seed, {t: n_per_task for t in TASKS})
    datasets: dict[str, dict[str, list]] = {"train": {}, "dev": {}, "test": {}}
    for task, examples in raw.items():
        for split, part in split_examples(examples, seed).items():
            datasets[split][task] = part
    vocab = Vocab(vocab_size)
    return make_loaders(datasets, vocab, batch_size, max_len=max_len, seed=seed), vocab
