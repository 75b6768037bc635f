"""Deterministic SGD training loop over labeled bi-temporal pairs.

Each step builds one graph over a whole batch (losses averaged), runs one
reverse pass, and applies a plain gradient step in sorted parameter order.
Shuffling is a seeded permutation per epoch, so a fixed seed reproduces the
loss log bitwise.  A non-finite loss aborts with the offending step index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NonFiniteError, ShapeError
from .head import ChangeHead, forward
from .losses import (LossWeights, change_cross_entropy, similarity_loss,
                     total_loss, upsample_loss)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class LabeledPair:
    image1: np.ndarray
    image2: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.image1.shape != self.image2.shape:
            raise ShapeError("bi-temporal images differ in shape")
        if self.label.shape[-2:] != self.image1.shape[-2:]:
            raise ShapeError("label grid does not match the images")
        if not np.all((self.label == 0) | (self.label == 1)):
            raise ValueError("change label must be binary")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """p <- p - lr * g for every parameter, in sorted-name order."""
    missing = sorted(set(params) - set(grads))
    if missing:
        raise KeyError(f"gradients missing for parameters: {missing}")
    return {name: params[name] - lr * grads[name] for name in sorted(params)}


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Seeded shuffle split into batches; permutes, never drops or repeats."""
    order = [int(i) for i in rng.permutation(n)]
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _batch_loss(head: ChangeHead, backbone, batch: list[LabeledPair],
                weights: LossWeights):
    g = Graph()
    pn = head.bind(g)
    parts = np.zeros(3)
    combined = None
    change_masks = []
    for pair in batch:
        raw = backbone.extract_features(pair.image1, pair.image2)
        result = forward(head, g, raw, pair.image1.shape[-2:], pn)
        cd = change_cross_entropy(g, result.logits, pair.label)
        ups = upsample_loss(g, result.aux_logits, pair.label)
        sim = similarity_loss(g, result.embeddings[0], result.embeddings[1], pair.label)
        sample_total = total_loss(g, cd, ups, sim, weights)
        parts += [float(cd.value), float(ups.value), float(sim.value)]
        combined = sample_total if combined is None else g.add(combined, sample_total)
        change_masks.append(result.change_map)
    loss = g.scale(combined, 1.0 / len(batch))
    parts /= len(batch)
    return g, loss, parts, change_masks


def train(dataset: list[LabeledPair], head: ChangeHead, backbone,
          cfg: TrainConfig, weights: LossWeights,
          log_stream=None, max_steps: int | None = None) -> list[dict]:
    """Run SGD; returns per-step records and leaves trained weights on `head`.

    Record fields: epoch, step, loss_cd, loss_ups, loss_sim, loss_total and
    iou_change (training IoU pooled over the epoch so far).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    shape = dataset[0].image1.shape
    for pair in dataset:
        if pair.image1.shape != shape:
            raise ShapeError("all training pairs must share one resolution")

    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        tp = fp = fn = 0
        for batch_ids in epoch_batches(len(dataset), cfg.batch_size, rng):
            batch = [dataset[i] for i in batch_ids]
            step += 1
            try:
                g, loss, parts, masks = _batch_loss(head, backbone, batch, weights)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite loss at step {step}: {exc}") from exc
            grads = g.backward(loss)
            head.params = sgd_step(head.params, grads, cfg.learning_rate)

            for pair, mask in zip(batch, masks):
                pred = mask[0] > 0.5
                gt = np.asarray(pair.label).reshape(pair.label.shape[-2:]) > 0.5
                tp += int(np.sum(pred & gt))
                fp += int(np.sum(pred & ~gt))
                fn += int(np.sum(~pred & gt))
            denom = tp + fp + fn
            record = {
                "epoch": epoch, "step": step,
                "loss_cd": parts[0], "loss_ups": parts[1], "loss_sim": parts[2],
                "loss_total": float(loss.value),
                "iou_change": (tp / denom) if denom else 0.0,
            }
            records.append(record)
            if log_stream is not None:
                log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            if max_steps is not None and step >= max_steps:
                return records
    return records


__all__ = ["TrainConfig", "LabeledPair", "sgd_step", "epoch_batches", "train"]
