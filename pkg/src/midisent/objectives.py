"""Classification losses, variational NLL losses and the weighted total objective."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateBatchError, DimensionError
from .model import CategoricalQ, GaussianQ, SpeakerHead, categorical_logprob, check_labels, gaussian_logprob
from .tensor import Tensor

AP_SCALE_MIN = 1e-6


@dataclass(frozen=True)
class LossWeights:
    cls_s: float = 5.0
    cls_d: float = 10.0
    mi_sd: float = 0.5     # I(x^s; x^d)
    mi_dy: float = 0.1     # I(x^d; y^s)
    mi_sy: float = 0.1     # I(x^s; y^d)

    def __post_init__(self):
        if any(not math.isfinite(w) or w < 0 for w in astuple(self)):
            raise ConfigError(f"loss weights must be finite and nonnegative: {astuple(self)}")

    def as_tuple(self) -> tuple[float, ...]:
        return astuple(self)


# objective presets, one per ablation setting
OBJECTIVES: dict[str, LossWeights] = {
    "embed_only": LossWeights(0.0, 0.0, 0.0, 0.0, 0.0),
    "cls_s": LossWeights(1.0, 0.0, 0.0, 0.0, 0.0),
    "cls_sd": LossWeights(5.0, 10.0, 0.0, 0.0, 0.0),
    "cls_sd_m1": LossWeights(5.0, 10.0, 0.5, 0.0, 0.0),
    "cls_sd_m23": LossWeights(5.0, 10.0, 0.0, 0.1, 0.1),
    "full": LossWeights(),
}


@dataclass(frozen=True)
class MarginConfig:
    scale: float = 30.0
    margin: float = 0.2
    ap_scale_init: float = 10.0
    ap_bias_init: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("AAM scale must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ConfigError("AAM margin must lie in [0, pi/2)")


def aam_softmax_loss(emb, labels, class_weights, s: float = 30.0, m: float = 0.2) -> Tensor:
    """Additive angular margin softmax, averaged over the batch.

    The target-class angle is shifted by ``m`` (capped at pi) before taking the
    cosine; all logits are scaled by ``s``.
    """
    emb, class_weights = T.as_tensor(emb), T.as_tensor(class_weights)
    if emb.ndim != 2 or class_weights.ndim != 2 or emb.shape[1] != class_weights.shape[1]:
        raise DimensionError(f"embeddings {emb.shape} vs class weights {class_weights.shape}")
    labels = check_labels(labels, class_weights.shape[0])
    if labels.shape[0] != emb.shape[0] or len(labels) == 0:
        raise DimensionError("need one label per embedding and N >= 1")
    rows = np.arange(len(labels))
    cosine = T.l2_normalize(emb) @ T.l2_normalize(class_weights).T
    target = cosine[rows, labels]
    shifted = T.cos(T.clamp(T.arccos(target) + m, hi=math.pi))
    onehot = np.zeros(cosine.shape)
    onehot[rows, labels] = 1.0
    logits = cosine + onehot * T.reshape(shifted - target, (len(labels), 1))
    logp = T.log_softmax(logits * s, axis=1)
    return -logp[rows, labels].mean()


def angular_prototypical_loss(emb_a, emb_b, w, b) -> Tensor:
    """Row i of ``emb_a`` is classified against the N prototypes in ``emb_b``.

    Similarity is ``w * cos + b`` with ``w`` clamped to at least 1e-6.
    """
    emb_a, emb_b = T.as_tensor(emb_a), T.as_tensor(emb_b)
    if emb_a.shape != emb_b.shape or emb_a.ndim != 2:
        raise DimensionError(f"query {emb_a.shape} and prototype {emb_b.shape} batches differ")
    n = emb_a.shape[0]
    if n < 2:
        raise DegenerateBatchError("angular prototypical loss needs N >= 2 speakers")
    cosine = T.l2_normalize(emb_a) @ T.l2_normalize(emb_b).T
    sim = cosine * T.clamp(w, lo=AP_SCALE_MIN) + b
    logp = T.log_softmax(sim, axis=1)
    idx = np.arange(n)
    return -logp[idx, idx].mean()


def speaker_cls_loss(emb_a, emb_b, labels, head: SpeakerHead, margin: MarginConfig) -> Tensor:
    """AAM over both utterances of every speaker plus the prototypical loss between them."""
    labels = np.asarray(labels)
    aam = aam_softmax_loss(T.concat([emb_a, emb_b], axis=0), np.concatenate([labels, labels]),
                           head.p("weight"), margin.scale, margin.margin)
    ap = angular_prototypical_loss(emb_a, emb_b, head.p("ap_scale"), head.p("ap_bias"))
    return aam + ap


def nll_gaussian(q: GaussianQ, xs, xd) -> Tensor:
    """-mean log q1(x^d | x^s); inputs are detached so only q1 receives gradient."""
    return -gaussian_logprob(q, T.as_tensor(xs).detach(), T.as_tensor(xd).detach()).mean()


def nll_categorical(q: CategoricalQ, x, y) -> Tensor:
    """-mean log q(y | x); the input is detached so only q receives gradient."""
    return -categorical_logprob(q, T.as_tensor(x).detach(), y).mean()


@dataclass
class LossTerms:
    cls_s: Tensor
    cls_d: Tensor
    mi_sd: Tensor
    mi_dy: Tensor
    mi_sy: Tensor

    def values(self) -> tuple[float, ...]:
        return tuple(float(t.data) for t in (self.cls_s, self.cls_d, self.mi_sd, self.mi_dy, self.mi_sy))


def total_loss(terms: LossTerms, weights: LossWeights) -> Tensor:
    """Weighted sum of the two classification losses and the three MI estimates."""
    parts = (terms.cls_s, terms.cls_d, terms.mi_sd, terms.mi_dy, terms.mi_sy)
    total = T.Tensor(0.0)
    for w, part in zip(weights.as_tuple(), parts):
        total = total + part * w
    return total


def weighted_sum(values, weights: LossWeights) -> float:
    """Plain-float twin of :func:`total_loss`, same accumulation order."""
    total = 0.0
    for w, v in zip(weights.as_tuple(), values):
        total = total + v * w
    return total
