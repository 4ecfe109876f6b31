"""Task losses and the composite multitask objective.

Reductions follow the source formulas: CE/BCE/MSE/log-cosh are mean-reduced,
KL divergence is batch-mean, ordinal CE and contrastive are sum-reduced.
Numerically fragile forms are stabilized (BCE on logits, softplus-form
log-cosh, clamped cumulative probabilities) without changing the math.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN2 = float(np.log(2.0))


def _as_labels(labels, n: int, upper: int | None = None) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.shape != (n,):
        raise ValueError(f"labels shape {arr.shape} != ({n},)")
    if upper is not None:
        ints = arr.astype(np.int64)
        if (ints < 0).any() or (ints >= upper).any():
            raise ValueError(f"labels outside [0, {upper})")
        return ints
    return arr.astype(np.float32)


def ce(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of integer labels under softmax(logits)."""
    n, c = logits.shape
    y = _as_labels(labels, n, upper=c)
    onehot = np.zeros((n, c), dtype=np.float32)
    onehot[np.arange(n), y] = 1.0
    lp = T.log_softmax(logits)
    return T.tsum(lp * Tensor(onehot)) * (-1.0 / n)


def bce(logits: Tensor, labels) -> Tensor:
    """Mean binary cross entropy on logits, in the overflow-safe form
    relu(p) - p*y + softplus(-|p|)."""
    y = Tensor(np.asarray(labels, dtype=np.float32))
    if y.shape != logits.shape:
        raise ValueError(f"labels shape {y.shape} != logits shape {logits.shape}")
    return T.mean(T.relu(logits) - logits * y + T.softplus(-T.tabs(logits)))


def kl_div(log_probs: Tensor, target_probs) -> Tensor:
    """Batch-mean KL(p || q) given log q; 0*log(0) taken as 0."""
    p = np.asarray(target_probs, dtype=np.float32)
    if p.shape != log_probs.shape:
        raise ValueError(f"target shape {p.shape} != log_probs shape {log_probs.shape}")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-5):
        raise ValueError("target probability rows must sum to 1")
    plogp = float(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum())
    cross = T.tsum(Tensor(p) * log_probs)
    return (plogp - cross) * (1.0 / log_probs.shape[0])


def mse(preds: Tensor, targets) -> Tensor:
    t = Tensor(np.asarray(targets, dtype=np.float32))
    d = preds - t
    return T.mean(d * d)


def pearson_loss(preds: Tensor, targets) -> Tensor:
    """1 - sample Pearson correlation; raises on zero-variance input."""
    t = np.asarray(targets, dtype=np.float32)
    n = preds.shape[0]
    if preds.ndim != 1 or n < 2:
        raise ValueError(f"pearson_loss needs a 1-d batch of >= 2, got {preds.shape}")
    if np.ptp(preds.data) == 0.0 or np.ptp(t) == 0.0:
        raise ValueError("pearson correlation undefined for zero-variance input")
    xc = preds - T.mean(preds)
    yc = Tensor(t - t.mean())
    num = T.tsum(xc * yc)
    denom = T.sqrt(T.tsum(xc * xc) * T.tsum(yc * yc))
    return 1.0 - num / denom


def log_cosh(preds: Tensor, targets) -> Tensor:
    """Mean log(cosh(residual)) via the stable identity r + softplus(-2r) - ln 2."""
    t = Tensor(np.asarray(targets, dtype=np.float32))
    r = preds - t
    return T.mean(r + T.softplus(r * -2.0) - LN2)


def mixed_bce_mse(logits: Tensor, labels, lam_bce: float = 1.0, lam_mse: float = 0.1) -> Tensor:
    """BCE against one-hot rating classes plus MSE of the probability-weighted
    expected score on the grid [1..5] against the raw labels."""
    n, c = logits.shape
    if c != 5:
        raise ValueError(f"mixed_bce_mse expects 5 rating classes, got {c}")
    raw = np.asarray(labels, dtype=np.float32)
    y = _as_labels(labels, n, upper=c)
    onehot = np.zeros((n, c), dtype=np.float32)
    onehot[np.arange(n), y] = 1.0
    oh = Tensor(onehot)
    bce_part = T.mean(T.relu(logits) - logits * oh + T.softplus(-T.tabs(logits)))
    grid = Tensor(np.arange(1.0, 6.0, dtype=np.float32).reshape(5, 1))
    expected = T.reshape(T.matmul(T.softmax(logits), grid), (n,))
    d = expected - Tensor(raw)
    return bce_part * lam_bce + T.mean(d * d) * lam_mse


def ordinal_ce(logits: Tensor, labels, eps: float = 1e-7) -> Tensor:
    """Sum-reduced ordinal loss on clamped cumulative softmax probabilities.

    Sample with label y contributes -log(1-cum_j) for j < y and -log(cum_j) for
    j >= y, over j in [0, K-1); the top class's own term is structurally zero
    information (cum_{K-1} == 1) and is dropped."""
    n, k = logits.shape
    y = _as_labels(labels, n, upper=k)
    probs = T.softmax(logits)
    upper_tri = Tensor(np.triu(np.ones((k, k), dtype=np.float32)))
    cum = T.clip(T.matmul(probs, upper_tri), eps, 1.0 - eps)
    cols = np.arange(k - 1)
    below = (cols[None, :] < y[:, None]).astype(np.float32)  # j < y
    cut = cum[:, : k - 1]
    term = Tensor(below) * T.log(1.0 - cut) + Tensor(1.0 - below) * T.log(cut)
    return -T.tsum(term)


def contrastive(emb1: Tensor, emb2: Tensor, labels, margin: float = 1.0,
                positive_label: int = 0) -> Tensor:
    """Sum-reduced contrastive loss on Euclidean pair distances.

    positive_label picks the convention: the source formula pulls label-0 pairs
    together; positive_label=1 gives the standard convention instead."""
    if emb1.shape != emb2.shape:
        raise ValueError(f"embedding shapes differ: {emb1.shape} vs {emb2.shape}")
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    y = np.asarray(labels, dtype=np.float32)
    pos = Tensor((y == positive_label).astype(np.float32))
    diff = emb1 - emb2
    dist = T.sqrt(T.tsum(diff * diff, axis=-1) + 1e-12)
    pull = pos * dist * dist
    hinge = T.relu(margin - dist)
    push = (1.0 - pos) * hinge * hinge
    return T.tsum(pull * 0.5 + push * 0.5)


# ---------------------------------------------------------------------------
# composite objective
# ---------------------------------------------------------------------------

KINDS = {
    "ce": ce, "bce": bce, "kl": kl_div, "mse": mse, "pearson": pearson_loss,
    "logcosh": log_cosh, "mixed_bce_mse": mixed_bce_mse, "ordinal_ce": ordinal_ce,
    "contrastive": contrastive,
}


@dataclass
class LossSpec:
    task: str
    kind: str
    mix_weights: tuple[float, float] | None = None
    margin: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; choose one of {sorted(KINDS)}")
        if self.mix_weights is not None and any(w < 0 for w in self.mix_weights):
            raise ValueError("mix weights must be non-negative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")

    def __call__(self, *args) -> Tensor:
        fn = KINDS[self.kind]
        if self.kind == "mixed_bce_mse" and self.mix_weights is not None:
            return fn(*args, lam_bce=self.mix_weights[0], lam_mse=self.mix_weights[1])
        if self.kind == "contrastive":
            return fn(*args, margin=self.margin)
        return fn(*args)


DEFAULT_SPECS = {
    "sst": LossSpec("sst", "ce"),
    "para": LossSpec("para", "bce"),
    "sts": LossSpec("sts", "pearson"),
}


def composite_loss(outputs: dict, batches: dict, specs: dict[str, LossSpec] | None = None) -> Tensor:
    """Unweighted sum of the three per-task losses.

    outputs/batches map task name to (predictions,) and (labels,); all three
    tasks must be present."""
    specs = specs or DEFAULT_SPECS
    missing = {"sst", "para", "sts"} - outputs.keys() | {"sst", "para", "sts"} - batches.keys()
    if missing:
        raise ValueError(f"composite loss needs all three tasks; missing {sorted(missing)}")
    total = None
    for task in ("sst", "para", "sts"):
        out = outputs[task]
        args = (*out, batches[task]) if isinstance(out, tuple) else (out, batches[task])
        loss = specs[task](*args)
        total = loss if total is None else total + loss
    return total
