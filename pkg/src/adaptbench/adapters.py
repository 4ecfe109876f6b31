"""LoRA/DoRA linear wrappers, the four injection modes, and freezing control.

LoRA keeps the wrapped weight W0 frozen and learns a rank-r update BA so the
effective weight is W0 + BA. DoRA additionally learns a per-column magnitude m
and uses m/:norm:(W0+BA) * (W0+BA). "Column" means the input-feature axis: for a
weight of shape [out, in], norms are taken over the out axis.

Injection modes:
  attn-only   wrap Q/K/V, freeze the whole backbone except the adapters
  attn        wrap Q/K/V, leave unwrapped backbone parameters trainable
  all-lin-only / all-lin   same split, but wrapping every backbone linear
                           (Q/K/V, attention output, both feed-forwards, pooler)

Frozen-forever parameters are marked pinned so the epoch-level unfreezing
schedule can never resurrect them. Classifier heads are never touched here.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from . import tensor as T
from .encoder import Encoder
from .tensor import Tensor

MODES = ("none", "attn-only", "attn", "all-lin-only", "all-lin")

ATTN_TARGETS = ("q", "k", "v")
ALL_LIN_TARGETS = ("q", "k", "v", "attn_out", "ff1", "ff2")

# Appendix-style directive diagnostics, kept as stable contract strings.
BAD_LAYER_SPEC = ("Invalid layer specification. Ensure it follows 'unfreezetopN' "
                  "format where N is a number.")
BAD_DIRECTIVE = ("Invalid structure parameter. Use 'freezeall','unfreezeall', "
                 "or 'unfreezetopN' where N is a number.")


@dataclass
class AdapterConfig:
    rank: int = 1
    mode: str = "none"
    use_dora: bool = False
    alpha: int | None = None  # kept equal to rank; scaling is always 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown adapter mode {self.mode!r}; choose one of {MODES}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            self.alpha = self.rank
        elif self.alpha != self.rank:
            raise ValueError(f"alpha is pinned to rank ({self.rank}), got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


class LoraLinear(nn.Module):
    """base(x) + B(Ax); A Gaussian(0, 0.02) [r, in], B zeros [out, r].

    Zero-initialized B makes a fresh wrapper bitwise transparent."""

    def __init__(self, base: nn.Linear, rank: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.base = base
        self.rank = rank
        base.weight.requires_grad = False
        base.weight.pinned = True
        if base.bias is not None:
            base.bias.requires_grad = False
            base.bias.pinned = True
        self.lora_a = nn.Parameter(
            rng.normal(0.0, 0.02, size=(rank, base.in_features)).astype(np.float32))
        self.lora_b = nn.Parameter(np.zeros((base.out_features, rank), dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        update = T.matmul(T.matmul(x, T.transpose(self.lora_a)), T.transpose(self.lora_b))
        return self.base(x) + update

    def delta_weight(self) -> np.ndarray:
        return self.lora_b.data @ self.lora_a.data


class DoraLinear(nn.Module):
    """x @ (m/:norm:(W0+BA) * (W0+BA))^T + bias, with m trainable.

    m starts as the exact column norms of W0 (computed in float64), so a fresh
    wrapper reproduces the base output up to the 1e-8 norm guard. The column
    norm is differentiated in full; nothing is detached."""

    EPS = 1e-8

    def __init__(self, base: nn.Linear, rank: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.base = base
        self.rank = rank
        base.weight.requires_grad = False
        base.weight.pinned = True
        if base.bias is not None:
            base.bias.requires_grad = False
            base.bias.pinned = True
        self.lora_a = nn.Parameter(
            rng.normal(0.0, 0.02, size=(rank, base.in_features)).astype(np.float32))
        self.lora_b = nn.Parameter(np.zeros((base.out_features, rank), dtype=np.float32))
        norms = np.sqrt((base.weight.data.astype(np.float64) ** 2).sum(axis=0))
        self.magnitude = nn.Parameter(norms.astype(np.float32))

    def effective_weight(self) -> Tensor:
        w = self.base.weight + T.matmul(self.lora_b, self.lora_a)
        col_sq = T.tsum(w * w, axis=0)
        if np.any(col_sq.data == 0.0):
            raise ValueError(
                f"DoRA forward with {int((col_sq.data == 0).sum())} zero columns "
                "in W0 + BA; the normalized direction is undefined")
        inv_norm = 1.0 / T.sqrt(col_sq + self.EPS)
        return w * (self.magnitude * inv_norm)

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, T.transpose(self.effective_weight()))
        if self.base.bias is not None:
            out = out + self.base.bias
        return out

    def delta_weight(self) -> np.ndarray:
        return self.lora_b.data @ self.lora_a.data


@dataclass
class InjectionReport:
    mode: str
    rank: int
    use_dora: bool
    rows: list[tuple[str, int, int, int, int]] = field(default_factory=list)  # path, d, k, r, trainable

    @property
    def trainable_adapter_params(self) -> int:
        return sum(row[4] for row in self.rows)

    def to_text(self) -> str:
        lines = [f"mode={self.mode} rank={self.rank} dora={'on' if self.use_dora else 'off'}"]
        lines += [f"{path}\td={d}\tk={k}\tr={r}\ttrainable={n}"
                  for path, d, k, r, n in self.rows]
        lines.append(f"total_trainable={self.trainable_adapter_params}")
        return "\n".join(lines)


def _encoders(model: nn.Module) -> list[tuple[str, Encoder]]:
    if isinstance(model, Encoder):
        return [("", model)]
    found = [(name, mod) for name, mod in model.named_modules() if isinstance(mod, Encoder)]
    if not found:
        raise ValueError("no encoder backbone found in model")
    return found


def inject(model: nn.Module, cfg: AdapterConfig, seed: int = 0) -> InjectionReport:
    """Wrap backbone linears per cfg.mode and pin what must stay frozen."""
    report = InjectionReport(cfg.mode, cfg.rank, cfg.use_dora)
    if cfg.mode == "none":
        return report
    for _, mod in model.named_modules():
        if isinstance(mod, (LoraLinear, DoraLinear)):
            raise ValueError("model already has adapters injected")
    rng = np.random.default_rng(seed)
    wrapper = DoraLinear if cfg.use_dora else LoraLinear
    targets = ATTN_TARGETS if cfg.mode in ("attn-only", "attn") else ALL_LIN_TARGETS
    wrap_pooler = cfg.mode in ("all-lin-only", "all-lin")

    for enc_path, enc in _encoders(model):
        prefix = enc_path + "." if enc_path else ""
        for i, layer in enumerate(enc.layers):
            for name in targets:
                base = getattr(layer, name)
                wrapped = wrapper(base, cfg.rank, rng)
                setattr(layer, name, wrapped)
                extra = base.in_features if cfg.use_dora else 0
                trainable = cfg.rank * (base.in_features + base.out_features) + extra
                report.rows.append((f"{prefix}layers.{i}.{name}",
                                    base.out_features, base.in_features, cfg.rank, trainable))
        if wrap_pooler:
            base = enc.pooler.dense
            enc.pooler.dense = wrapper(base, cfg.rank, rng)
            extra = base.in_features if cfg.use_dora else 0
            trainable = cfg.rank * (base.in_features + base.out_features) + extra
            report.rows.append((f"{prefix}pooler.dense",
                                base.out_features, base.in_features, cfg.rank, trainable))
        if cfg.mode.endswith("-only"):
            # whole backbone frozen for good, adapters excepted
            adapter_ids = {id(p) for p in _adapter_params(enc)}
            for _, p in enc.named_parameters():
                if id(p) not in adapter_ids:
                    p.requires_grad = False
                    p.pinned = True
    return report


def _adapter_params(root: nn.Module) -> list[nn.Parameter]:
    out = []
    for _, mod in root.named_modules():
        if isinstance(mod, (LoraLinear, DoraLinear)):
            out.append(mod.lora_a)
            out.append(mod.lora_b)
            if isinstance(mod, DoraLinear):
                out.append(mod.magnitude)
    return out


def manage_freezing(model: nn.Module, directive: str) -> None:
    """Apply freezeall / unfreezeall / unfreezetopN to every backbone.

    unfreezetopN freezes everything, then unfreezes the pooler (the block after
    the attention stack) and the last N attention layers; embeddings stay
    frozen. Pinned parameters stay frozen under every directive."""
    encoders = _encoders(model)
    if directive == "freezeall":
        for _, enc in encoders:
            for _, p in enc.named_parameters():
                p.requires_grad = False
        return
    if directive == "unfreezeall":
        for _, enc in encoders:
            for _, p in enc.named_parameters():
                p.requires_grad = not p.pinned
        return
    if directive.startswith("unfreezetop"):
        suffix = directive[len("unfreezetop"):]
        if not re.fullmatch(r"\d+", suffix):
            raise ValueError(BAD_LAYER_SPEC)
        n = int(suffix)
        for _, enc in encoders:
            if n > len(enc.layers):
                raise ValueError(
                    f"unfreezetop{n}: backbone has only {len(enc.layers)} layers")
        for _, enc in encoders:
            for _, p in enc.named_parameters():
                p.requires_grad = False
            for _, p in enc.pooler.named_parameters():
                p.requires_grad = not p.pinned
            for layer in list(enc.layers)[len(enc.layers) - n:]:
                for _, p in layer.named_parameters():
                    p.requires_grad = not p.pinned
        return
    raise ValueError(BAD_DIRECTIVE)


def trainable_backbone_params(model: nn.Module) -> int:
    return sum(p.size for _, enc in _encoders(model)
               for p in enc.parameters() if p.requires_grad)
