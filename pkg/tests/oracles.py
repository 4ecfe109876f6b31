"""Independent float64 reference implementations used by the test suite.

Nothing here imports the package under test. Every function is a from-scratch
transcription of the underlying math so agreement with the package is evidence,
not tautology.
"""
from __future__ import annotations

from decimal import Decimal, ROUND_HALF_UP

import numpy as np


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_fd(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# losses (all float64, reductions spelled out)
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean NLL of integer labels under softmax(logits)."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    rows = np.arange(len(labels))
    return float(-logp[rows, labels].mean())


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    vals = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(vals.mean())


def kl_div_batchmean(log_q: np.ndarray, p: np.ndarray) -> float:
    """KL(p || q) from log-probabilities of q, averaged over the batch axis."""
    log_q = np.asarray(log_q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - log_q), 0.0)
    return float(terms.sum() / log_q.shape[0])


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((d * d).mean())


def pearson_loss(pred: np.ndarray, target: np.ndarray) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    r = (xc * yc).sum() / np.sqrt((xc * xc).sum() * (yc * yc).sum())
    return float(1.0 - r)


def log_cosh(pred: np.ndarray, target: np.ndarray) -> float:
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    vals = r + np.log1p(np.exp(-2.0 * r)) - np.log(2.0)
    # softplus(-2r) in stable form for the r < 0 branch
    vals = np.where(
        r >= 0,
        r + np.log1p(np.exp(-2.0 * r)) - np.log(2.0),
        -r + np.log1p(np.exp(2.0 * r)) - np.log(2.0),
    )
    return float(vals.mean())


def mixed_bce_mse(logits: np.ndarray, labels_float: np.ndarray,
                  lam_bce: float = 1.0, lam_mse: float = 0.1) -> float:
    """BCE over 5 rating classes one-hot vs integer labels, plus MSE of the
    probability-weighted expected score [1..5] against the raw float labels."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels_float, dtype=np.float64)
    onehot = np.zeros_like(z)
    onehot[np.arange(len(y)), y.astype(int)] = 1.0
    bce_vals = np.maximum(z, 0.0) - z * onehot + np.log1p(np.exp(-np.abs(z)))
    bce = bce_vals.mean()
    probs = _softmax(z)
    scores = (probs * np.arange(1.0, 6.0)).sum(axis=-1)
    m = ((scores - y) ** 2).mean()
    return float(lam_bce * bce + lam_mse * m)


def ordinal_ce(logits: np.ndarray, labels: np.ndarray, eps: float = 1e-7) -> float:
    """Cumulative-probability ordinal loss, summed over the batch.

    P(class <= k) from the softmax cumsum, clipped to [eps, 1-eps]; each sample
    contributes -sum_{k<y} log(1 - cum_k) - sum_{k>=y, k<K-1} log(cum_k) with the
    top class's own complement term dropped (it is structurally zero).
    """
    z = np.asarray(logits, dtype=np.float64)
    probs = _softmax(z)
    cum = np.cumsum(probs, axis=-1)
    cum = np.clip(cum, eps, 1.0 - eps)
    n, k = z.shape
    total = 0.0
    for i in range(n):
        y = int(labels[i])
        for j in range(k - 1):  # last column carries no information
            if j < y:
                total -= np.log(1.0 - cum[i, j])
            else:
                total -= np.log(cum[i, j])
    return float(total)


def contrastive(e1: np.ndarray, e2: np.ndarray, labels: np.ndarray,
                margin: float = 1.0, positive_label: int = 0) -> float:
    """Sum-reduced contrastive loss: 0.5*(pull d^2 + push max(0, margin-d)^2).

    positive_label selects the convention: samples whose label equals it are
    pulled together (d^2 term) and the rest pushed past the margin.
    """
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    d = np.sqrt(((a - b) ** 2).sum(axis=-1) + 1e-12)
    pos = (y == positive_label).astype(np.float64)
    vals = 0.5 * pos * d ** 2 + 0.5 * (1.0 - pos) * np.maximum(margin - d, 0.0) ** 2
    return float(vals.sum())


# ---------------------------------------------------------------------------
# DoRA effective weight
# ---------------------------------------------------------------------------

def dora_effective_weight(w0: np.ndarray, a: np.ndarray, b: np.ndarray,
                          m: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """m-scaled column-direction of (w0 + b @ a); columns indexed by input feature."""
    w = np.asarray(w0, dtype=np.float64) + np.asarray(b, dtype=np.float64) @ np.asarray(a, dtype=np.float64)
    norms = np.sqrt((w * w).sum(axis=0) + eps)
    return (np.asarray(m, dtype=np.float64) / norms)[None, :] * w


# ---------------------------------------------------------------------------
# optimizer recurrences (one explicit step each)
# ---------------------------------------------------------------------------

def sgd_step(theta, g, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64) + weight_decay * theta
    v = np.zeros_like(theta) if velocity is None else np.asarray(velocity, dtype=np.float64)
    v = momentum * v + g
    return theta - lr * v, v


def adam_step(theta, g, lr, t, m=None, v=None,
              beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    m = np.zeros_like(theta) if m is None else np.asarray(m, dtype=np.float64)
    v = np.zeros_like(theta) if v is None else np.asarray(v, dtype=np.float64)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    theta = theta - lr * mhat / (np.sqrt(vhat) + eps)
    if weight_decay:
        theta = theta - lr * weight_decay * np.asarray(theta)
    return theta, m, v


def adamax_step(theta, g, lr, t, m=None, u=None,
                beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    m = np.zeros_like(theta) if m is None else np.asarray(m, dtype=np.float64)
    u = np.zeros_like(theta) if u is None else np.asarray(u, dtype=np.float64)
    m = beta1 * m + (1.0 - beta1) * g
    u = np.maximum(beta2 * u, np.abs(g))
    theta = theta - (lr / (1.0 - beta1 ** t)) * m / (u + eps)
    if weight_decay:
        theta = theta - lr * weight_decay * theta
    return theta, m, u


def ema_update(shadow, param, decay):
    return decay * np.asarray(shadow, dtype=np.float64) + (1.0 - decay) * np.asarray(param, dtype=np.float64)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def triangular_lr(step: int, lo: float, hi: float, period: int,
                  decay_per_cycle: float = 1.0) -> float:
    cycle = step // period
    frac = (step % period) / period
    amp = (hi - lo) / (decay_per_cycle ** cycle)
    return lo + amp * (1.0 - abs(2.0 * frac - 1.0))


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------

def encoder_param_count(vocab: int, hidden: int, layers: int, ff: int, max_seq: int) -> int:
    emb = vocab * hidden + max_seq * hidden + 2 * hidden  # token + position + LN
    per_layer = (
        4 * (hidden * hidden + hidden)      # q, k, v, attn out
        + 2 * hidden              # attention LN
        + hidden * ff + ff        # ff in
        + ff * hidden + hidden    # ff out
        + 2 * hidden              # output LN
    )
    pooler = hidden * hidden + hidden
    return emb + layers * per_layer + pooler


def attn_linear_count(hidden: int, layers: int) -> int:
    return layers * 3 * (hidden * hidden + hidden)


def other_linear_count(hidden: int, ff: int, layers: int) -> int:
    per_layer = (hidden * hidden + hidden) + (hidden * ff + ff) + (ff * hidden + hidden)
    return layers * per_layer


def lora_param_count(wrapped: list[tuple[int, int]], rank: int) -> int:
    return sum(rank * fin + fout * rank for fout, fin in wrapped)


def dora_param_count(wrapped: list[tuple[int, int]], rank: int) -> int:
    return lora_param_count(wrapped, rank) + sum(fin for _, fin in wrapped)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def overall_score(sst_acc: float, para_acc: float, sts_pearson: float) -> float:
    return (sst_acc + para_acc + (sts_pearson + 1.0) / 2.0) / 3.0


def round3_half_up(x: float) -> str:
    return str(Decimal(f"{x:.9f}").quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# benchmark grid
# ---------------------------------------------------------------------------

def enumerate_grid(lrs, batches, ranks, modes, doras, ft_modes):
    """Deduplicated feasible configurations: mode 'none' collapses the rank and
    dora axes, every other mode collapses the fine-tune axis."""
    seen = set()
    for lr in lrs:
        for bs in batches:
            for mode in modes:
                for rank in ranks:
                    for dora in doras:
                        for ft in ft_modes:
                            if mode == "none":
                                key = (lr, bs, mode, None, None, ft)
                            else:
                                key = (lr, bs, mode, rank, dora, None)
                            seen.add(key)
    return seen


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------

def weighted_mean(outputs, weights):
    """Explicit weighted average in float64, for the repeated-vote identity."""
    total = sum(np.asarray(o, dtype=np.float64) * w for o, w in zip(outputs, weights))
    return total / sum(weights)
