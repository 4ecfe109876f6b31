"""Mean-of-predictions ensembling over trained multitask models.

An ensemble is just an ordered bag of models; listing a member twice gives it
two votes. Averaging happens on raw task outputs (sentiment logits, paraphrase
logits, similarity scores), never on post-processed labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import MultitaskModel
from .tensor import Tensor, no_grad
from .train import load_checkpoint


@dataclass
class Ensemble:
    members: list[MultitaskModel]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    # Mirror the model surface so evaluate() accepts an ensemble unchanged.

    @property
    def training(self) -> bool:
        return any(m.training for m in self.members)

    def train(self, mode: bool = True) -> "Ensemble":
        for m in self.members:
            m.train(mode)
        return self

    def eval(self) -> "Ensemble":
        return self.train(False)

    def predict_sentiment(self, ids, mask) -> Tensor:
        return ensemble_predict_sentiment(self, ids, mask)

    def predict_paraphrase(self, ids1, mask1, ids2, mask2) -> Tensor:
        return ensemble_predict_paraphrase(self, ids1, mask1, ids2, mask2)

    def predict_similarity(self, ids1, mask1, ids2, mask2) -> Tensor:
        return ensemble_predict_similarity(self, ids1, mask1, ids2, mask2)


def _averaged(ens: Ensemble, run) -> Tensor:
    was_training = [m.training for m in ens.members]
    outs = []
    with no_grad():
        for m in ens.members:
            m.eval()
            outs.append(run(m).data)
    for m, mode in zip(ens.members, was_training):
        m.train(mode)
    shapes = {o.shape for o in outs}
    if len(shapes) != 1:
        raise ValueError(f"ensemble member outputs disagree on shape: {sorted(shapes)}")
    # Float addition is order-sensitive; sorting the vote axis pins one
    # summation order for every permutation of the members.
    votes = np.sort(np.stack(outs).astype(np.float64), axis=0)
    return Tensor((votes.sum(axis=0) / len(outs)).astype(np.float32))


def ensemble_predict_sentiment(ens: Ensemble, ids, mask) -> Tensor:
    return _averaged(ens, lambda m: m.predict_sentiment(ids, mask))


def ensemble_predict_paraphrase(ens: Ensemble, ids1, mask1, ids2, mask2) -> Tensor:
    return _averaged(ens, lambda m: m.predict_paraphrase(ids1, mask1, ids2, mask2))


def ensemble_predict_similarity(ens: Ensemble, ids1, mask1, ids2, mask2) -> Tensor:
    return _averaged(ens, lambda m: m.predict_similarity(ids1, mask1, ids2, mask2))


def load_ensemble(paths) -> Ensemble:
    """Load checkpoints into an ensemble, keeping the given order.

    The architecture of each member comes from its checkpoint header, so mixing
    e.g. duality and yin-yang models is fine. Repeating a path repeats the vote.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("load_ensemble needs at least one checkpoint path")
    members = []
    for path in paths:
        try:
            model, _ = load_checkpoint(path)
        except Exception as exc:
            raise ValueError(f"could not load ensemble member {path!r}: {exc}") from exc
        members.append(model.eval())
    return Ensemble(members)
