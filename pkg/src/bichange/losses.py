"""Training losses: change cross-entropy, per-level upsampling CE, and the
unchanged-region similarity penalty, combined by a weighted sum.

The change loss is two-channel softmax cross-entropy (the decoder emits two
logit channels and decodes by argmax, so a one-channel sigmoid form would
not match it), averaged over pixels so the weights are resolution
independent.  The similarity term averages 1 - cos over unchanged pixels
only and is defined as 0 when no pixel is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ShapeError


@dataclass(frozen=True)
class LossWeights:
    change: float = 0.8
    upsample: float = 0.1
    similarity: float = 0.1

    def __post_init__(self):
        if self.change < 0 or self.upsample < 0 or self.similarity < 0:
            raise ValueError("loss weights must be non-negative")


def _check_binary_label(label: np.ndarray) -> np.ndarray:
    label = np.asarray(label, dtype=np.float64)
    if label.ndim == 3:
        if label.shape[0] != 1:
            raise ShapeError(f"label must be single-channel, got {label.shape}")
        label = label[0]
    if not np.all((label == 0.0) | (label == 1.0)):
        raise ValueError("label values must be exactly 0 or 1")
    return label


def change_cross_entropy(g: Graph, logits: Node, label: np.ndarray) -> Node:
    """Mean over pixels of softmax CE between [2,H,W] logits and a binary map."""
    label = _check_binary_label(label)
    if logits.value.shape != (2,) + label.shape:
        raise ShapeError(
            f"logits {logits.value.shape} do not match label {label.shape}")
    logp = g.log_softmax(g.transpose(logits, (1, 2, 0)))
    onehot = np.stack([1.0 - label, label], axis=-1)
    picked = g.mul(logp, g.constant(onehot))
    return g.scale(g.reduce_sum(picked), -1.0 / label.size)


def upsample_loss(g: Graph, aux_logits: list[Node], label: np.ndarray) -> Node:
    """Sum of the per-level change CE over all four auxiliary logit maps."""
    if len(aux_logits) != 4:
        raise ShapeError(f"expected 4 auxiliary logit maps, got {len(aux_logits)}")
    total = change_cross_entropy(g, aux_logits[0], label)
    for aux in aux_logits[1:]:
        total = g.add(total, change_cross_entropy(g, aux, label))
    return total


def similarity_loss(g: Graph, emb1: Node, emb2: Node, label: np.ndarray) -> Node:
    """Mean of (1 - cos) over unchanged pixels; 0 when everything changed."""
    label = _check_binary_label(label)
    if emb1.value.shape != emb2.value.shape:
        raise ShapeError("similarity_loss: embedding shapes differ")
    if emb1.value.shape[1:] != label.shape:
        raise ShapeError("similarity_loss: embedding grid does not match label")
    unchanged = 1.0 - label
    count = unchanged.sum()
    if count == 0:
        return g.constant(0.0)
    cos = g.cosine_map(emb1, emb2)
    dissim = g.scale(g.shift(cos, -1.0), -1.0)  # 1 - cos
    return g.scale(g.reduce_sum(g.mul(dissim, g.constant(unchanged))), 1.0 / count)


def total_loss(g: Graph, cd: Node, ups: Node, sim: Node,
               weights: LossWeights) -> Node:
    return g.add(g.add(g.scale(cd, weights.change),
                       g.scale(ups, weights.upsample)),
                 g.scale(sim, weights.similarity))


__all__ = [
    "LossWeights", "change_cross_entropy", "upsample_loss",
    "similarity_loss", "total_loss",
]
