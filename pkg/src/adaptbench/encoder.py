"""Mini-BERT encoder: embeddings, post-LN self-attention stack, tanh pooler.

Sentence pairs are encoded separately (the downstream model compares pooled
embeddings), so there are no segment embeddings. Every linear is addressable by
a stable dotted path, which is what adapter injection and the unfreezing
manager key on.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

# Masked attention positions get this added to their scores pre-softmax; at
# float32 the shifted exp underflows to exactly 0, so masking is bitwise.
MASK_OFFSET = 1e4


@dataclass
class EncoderConfig:
    vocab_size: int = 30522
    hidden: int = 768
    num_layers: int = 12
    num_heads: int = 12
    ff_dim: int = 3072
    max_seq_len: int = 512
    dropout_p: float = 0.3
    seed: int = 0
    # "zeros" skips the Gaussian fill so huge configs build instantly; useful
    # for anything that only needs shapes and counts.
    init: str = "normal"

    def __post_init__(self) -> None:
        dims = (self.vocab_size, self.hidden, self.num_layers, self.num_heads,
                self.ff_dim, self.max_seq_len)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.init not in ("normal", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def bert_base_config(**overrides) -> EncoderConfig:
    return EncoderConfig(**overrides)


def desk_config(**overrides) -> EncoderConfig:
    base = dict(vocab_size=4096, hidden=32, num_layers=2, num_heads=2,
                ff_dim=64, max_seq_len=32, dropout_p=0.0)
    base.update(overrides)
    return EncoderConfig(**base)


class Embeddings(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.token = nn.Parameter(np.zeros((cfg.vocab_size, cfg.hidden), dtype=np.float32))
        self.position = nn.Parameter(np.zeros((cfg.max_seq_len, cfg.hidden), dtype=np.float32))
        if cfg.init == "normal":
            self.token.data[...] = rng.normal(0.0, 0.02, self.token.shape).astype(np.float32)
            self.position.data[...] = rng.normal(0.0, 0.02, self.position.shape).astype(np.float32)
        self.ln = nn.LayerNorm(cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout_p, rng=np.random.default_rng(rng.integers(2**63)))

    def forward(self, token_ids: np.ndarray) -> Tensor:
        seq_len = token_ids.shape[1]
        tok = T.embedding_lookup(self.token, token_ids)
        pos = T.embedding_lookup(self.position, np.arange(seq_len))
        return self.dropout(self.ln(tok + pos))


class TransformerLayer(nn.Module):
    """Post-LN encoder block: self-attention then a ReLU feed-forward, each
    wrapped in residual + layer norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        h = cfg.hidden
        self.num_heads = cfg.num_heads
        self.head_dim = h // cfg.num_heads
        self.q = nn.Linear(h, h, init="zeros")
        self.k = nn.Linear(h, h, init="zeros")
        self.v = nn.Linear(h, h, init="zeros")
        self.attn_out = nn.Linear(h, h, init="zeros")
        self.ln_attn = nn.LayerNorm(h)
        self.ff1 = nn.Linear(h, cfg.ff_dim, init="zeros")
        self.ff2 = nn.Linear(cfg.ff_dim, h, init="zeros")
        self.ln_out = nn.LayerNorm(h)
        self.dropout = nn.Dropout(cfg.dropout_p, rng=np.random.default_rng(rng.integers(2**63)))
        if cfg.init == "normal":
            for lin in (self.q, self.k, self.v, self.attn_out, self.ff1, self.ff2):
                lin.weight.data[...] = rng.normal(0.0, 0.02, lin.weight.shape).astype(np.float32)

    def _attention(self, x: Tensor, additive_mask: Tensor) -> Tensor:
        batch, seq, h = x.shape

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (batch, seq, self.num_heads, self.head_dim)),
                               (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.head_dim))
        probs = T.softmax(scores + additive_mask, axis=-1)
        ctx = T.matmul(self.dropout(probs), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch, seq, h))
        return self.attn_out(ctx)

    def forward(self, x: Tensor, additive_mask: Tensor) -> Tensor:
        h = self.ln_attn(x + self.dropout(self._attention(x, additive_mask)))
        ff = self.ff2(T.relu(self.ff1(h)))
        return self.ln_out(h + self.dropout(ff))


class Pooler(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.dense = nn.Linear(cfg.hidden, cfg.hidden, init="zeros")
        if cfg.init == "normal":
            self.dense.weight.data[...] = rng.normal(0.0, 0.02, self.dense.weight.shape).astype(np.float32)

    def forward(self, hidden_states: Tensor) -> Tensor:
        return T.tanh(self.dense(hidden_states[:, 0]))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embeddings = Embeddings(cfg, rng)
        self.layers = nn.ModuleList([TransformerLayer(cfg, rng) for _ in range(cfg.num_layers)])
        self.pooler = Pooler(cfg, rng)

    def forward(self, token_ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
        token_ids = np.asarray(token_ids)
        attention_mask = np.asarray(attention_mask, dtype=np.float32)
        if token_ids.shape != attention_mask.shape:
            raise ValueError(
                f"mask shape {attention_mask.shape} != token shape {token_ids.shape}")
        if token_ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(
                f"sequence length {token_ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        additive = Tensor((attention_mask - 1.0) * MASK_OFFSET)
        additive = T.reshape(additive, (token_ids.shape[0], 1, 1, token_ids.shape[1]))
        x = self.embeddings(token_ids)
        for layer in self.layers:
            x = layer(x, additive)
        return self.pooler(x)

    encode = forward


def count_parameters(encoder: Encoder, which: str = "all") -> int:
    """Exact parameter counts; attn_linears covers Q/K/V, other_linears covers
    the remaining per-layer linears (attention output + both feed-forwards)."""
    if which == "all":
        return encoder.num_parameters()
    if which == "attn_linears":
        names = ("q", "k", "v")
    elif which == "other_linears":
        names = ("attn_out", "ff1", "ff2")
    else:
        raise ValueError(f"unknown filter {which!r}")
    total = 0
    for layer in encoder.layers:
        for name in names:
            lin = getattr(layer, name)
            lin = getattr(lin, "base", lin)  # see through adapter wrappers
            total += lin.weight.size + (lin.bias.size if lin.bias is not None else 0)
    return total
