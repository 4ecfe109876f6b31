"""Dual-backbone multitask model and its classifier heads.

One encoder ("bert_sentiment") serves sentiment; a second, separate encoder
("bert_sim") serves both sentence-pair tasks. Pair embeddings are compared
through a shared feature projector, then routed to per-task heads. Two
architecture variants exist: "yin-yang" concatenates [e1, e2, |e1-e2|, e1*e2,
cos] and batch-normalizes inside the projector and heads; "duality-of-man"
keeps only the symmetric features [|e1-e2|, e1*e2, cos] and uses no batch norm
anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .encoder import Encoder, EncoderConfig
from .tensor import Tensor

ARCHITECTURES = ("yin-yang", "duality-of-man")
CLF_KINDS = ("linear", "nonlinear", "conv")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    architecture: str = "yin-yang"
    clf: str = "linear"
    feature_proj_size: int | None = None  # defaults to encoder hidden
    seed: int = 0

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.clf not in CLF_KINDS:
            raise ValueError(f"unknown clf kind {self.clf!r}")
        if self.feature_proj_size is None:
            self.feature_proj_size = self.encoder.hidden

    def to_dict(self) -> dict:
        d = {"architecture": self.architecture, "clf": self.clf,
             "feature_proj_size": self.feature_proj_size, "seed": self.seed,
             "encoder": self.encoder.to_dict()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


def _feature_size(architecture: str, hidden: int) -> int:
    # yin-yang: e1, e2, |diff|, product, cosine; duality drops the raw embeddings
    return 4 * hidden + 1 if architecture == "yin-yang" else 2 * hidden + 1


def _classifier(kind: str, in_dim: int, out_dim: int, hidden: int,
                use_bn: bool, rng: np.random.Generator) -> nn.Module:
    if kind == "linear":
        return nn.Linear(in_dim, out_dim, rng=rng)
    if kind == "nonlinear":
        layers = [nn.Linear(in_dim, in_dim, rng=rng)]
        if use_bn:
            layers.append(nn.BatchNorm1d(in_dim))
        layers += [nn.ReLU(), nn.Linear(in_dim, out_dim, rng=rng)]
        return nn.Sequential(*layers)
    if kind == "conv":
        return ConvClassifier(in_dim, out_dim, hidden, use_bn, rng)
    raise ValueError(f"unknown clf kind {kind!r}")


class ConvClassifier(nn.Module):
    """1-d conv over the embedding vector treated as a length-D signal."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int,
                 use_bn: bool, rng: np.random.Generator) -> None:
        super().__init__()
        if in_dim < 3:
            raise ValueError(f"conv classifier needs input dim >= 3, got {in_dim}")
        mid = hidden // 2
        self.conv = nn.Conv1d(1, 4, 3, rng=rng)
        self.bn_conv = nn.BatchNorm1d(4) if use_bn else None
        self.fc1 = nn.Linear(4 * (in_dim - 2), mid, rng=rng)
        self.bn_fc = nn.BatchNorm1d(mid) if use_bn else None
        self.fc2 = nn.Linear(mid, out_dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.reshape(x, (x.shape[0], 1, x.shape[1]))
        h = self.conv(h)
        if self.bn_conv is not None:
            h = self.bn_conv(h)
        h = T.reshape(h, (h.shape[0], -1))
        h = self.fc1(h)
        if self.bn_fc is not None:
            h = self.bn_fc(h)
        h = self.fc2(T.relu(h))
        return h


class MultitaskModel(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc_seeds = rng.integers(2**31, size=2)
        self.bert_sentiment = Encoder(replace(cfg.encoder, seed=int(enc_seeds[0])))
        self.bert_sim = Encoder(replace(cfg.encoder, seed=int(enc_seeds[1])))

        h = cfg.encoder.hidden
        proj = cfg.feature_proj_size
        feat = _feature_size(cfg.architecture, h)
        use_bn = cfg.architecture == "yin-yang"
        if use_bn:
            self.comparison_features_fcn = nn.Sequential(
                nn.Linear(feat, proj, rng=rng), nn.BatchNorm1d(proj),
                nn.ReLU(), nn.Linear(proj, proj, rng=rng), nn.BatchNorm1d(proj),
            )
        else:
            self.comparison_features_fcn = nn.Sequential(
                nn.Linear(feat, proj, rng=rng), nn.ReLU(), nn.Linear(proj, proj, rng=rng),
            )
        self.sentiment_head = _classifier(cfg.clf, h, 5, h, use_bn, rng)
        self.paraphrase_head = _classifier(cfg.clf, proj, 1, h, use_bn, rng)
        self.similarity_head = _classifier(cfg.clf, proj, 1, h, use_bn, rng)

    # -- task paths ------------------------------------------------------------

    def extract_comparison_features(self, ids1, mask1, ids2, mask2) -> Tensor:
        e1 = self.bert_sim(ids1, mask1)
        e2 = self.bert_sim(ids2, mask2)
        diff = T.tabs(e1 - e2)
        prods = e1 * e2
        cos = T.reshape(T.cosine_similarity(e1, e2), (e1.shape[0], 1))
        if self.cfg.architecture == "yin-yang":
            feats = T.concat([e1, e2, diff, prods, cos], axis=1)
        else:
            feats = T.concat([diff, prods, cos], axis=1)
        return self.comparison_features_fcn(feats)

    def predict_sentiment(self, ids, mask) -> Tensor:
        return self.sentiment_head(self.bert_sentiment(ids, mask))

    def predict_paraphrase(self, ids1, mask1, ids2, mask2) -> Tensor:
        logits = self.paraphrase_head(
            self.extract_comparison_features(ids1, mask1, ids2, mask2))
        return T.reshape(logits, (logits.shape[0],))

    def predict_similarity(self, ids1, mask1, ids2, mask2) -> Tensor:
        scores = self.similarity_head(
            self.extract_comparison_features(ids1, mask1, ids2, mask2))
        return T.reshape(scores, (scores.shape[0],))

    # -- parameter partitions ----------------------------------------------------

    def task_parameters(self, task: str) -> list[tuple[str, nn.Parameter]]:
        """Parameters on a task's forward path, for per-task optimizers."""
        if task == "sst":
            groups = [("bert_sentiment", self.bert_sentiment),
                      ("sentiment_head", self.sentiment_head)]
        elif task == "para":
            groups = [("bert_sim", self.bert_sim),
                      ("comparison_features_fcn", self.comparison_features_fcn),
                      ("paraphrase_head", self.paraphrase_head)]
        elif task == "sts":
            groups = [("bert_sim", self.bert_sim),
                      ("comparison_features_fcn", self.comparison_features_fcn),
                      ("similarity_head", self.similarity_head)]
        else:
            raise ValueError(f"unknown task {task!r}; choose sst, para, or sts")
        return [(f"{prefix}.{name}", p) for prefix, mod in groups
                for name, p in mod.named_parameters()]

    def head_parameters(self) -> list[nn.Parameter]:
        mods = [self.comparison_features_fcn, self.sentiment_head,
                self.paraphrase_head, self.similarity_head]
        return [p for mod in mods for p in mod.parameters()]
