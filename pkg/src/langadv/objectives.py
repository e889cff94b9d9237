"""Task heads and the task / discriminator / generator losses.

Losses are sums over the batch by default (``reduction="sum"``), which is the
batch-size-1 form written per example; ``reduction="mean"`` divides by the
number of examples in the batch and is what the trainer uses.

Language labels: 1 = source language ("English"), 0 = target language.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class TaskHead:
    """Output projection ``W_T`` (K x hidden) and bias ``b_T`` (K)."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"head weight {weight.shape} / bias {bias.shape} are inconsistent")
        if weight.shape[0] < 2:
            raise ValueError("a task head needs at least two classes")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, num_classes: int, hidden: int, rng: np.random.Generator) -> "TaskHead":
        return cls(
            Parameter("task.weight", rng.normal(0.0, 0.02, size=(num_classes, hidden))),
            Parameter("task.bias", np.zeros(num_classes)),
        )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def logits(self, states: Tensor) -> Tensor:
        if states.shape[-1] != self.weight.shape[1]:
            raise ad.ShapeError(f"head expects width {self.weight.shape[1]}, got {states.shape[-1]}")
        return ad.matmul(states, ad.transpose(self.weight)) + self.bias


class Discriminator:
    """Language discriminator ``w_D`` (hidden) and scalar ``b_D``."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if weight.ndim != 1 or bias.shape != (1,):
            raise ValueError(f"discriminator weight {weight.shape} / bias {bias.shape} are inconsistent")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator) -> "Discriminator":
        return cls(
            Parameter("disc.weight", rng.normal(0.0, 0.02, size=hidden)),
            Parameter("disc.bias", np.zeros(1)),
        )

    @property
    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


def _reduce(total: Tensor, n: int, reduction: str) -> Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / n)
    raise ValueError(f"unknown reduction {reduction!r}")


def one_hot(indices, num_classes: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_classes):
        raise ValueError(f"label index outside [0, {num_classes})")
    out = np.zeros(idx.shape + (num_classes,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def classify_doc(head: TaskHead, pooled: Tensor) -> Tensor:
    """Class distribution per row, softmax(W_T h + b_T)."""
    return ad.softmax(head.logits(pooled))


def task_loss_doc(pred: Tensor, labels: Sequence[int], reduction: str = "sum") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (pred.shape[0],):
        raise ValueError(f"need one label per row: {labels.shape} labels for {pred.shape[0]} rows")
    target = one_hot(labels, pred.shape[1])
    total = -ad.tsum(ad.mul(ad.log(ad.clamp_prob(pred)), target))
    return _reduce(total, pred.shape[0], reduction)


def tag_targets(labels: Sequence[Sequence[int]], mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Scatter per-row label lists onto the unmasked positions as one-hot rows.

    Masked positions get all-zero rows and so contribute nothing.
    """
    mask = np.asarray(mask)
    if len(labels) != mask.shape[0]:
        raise ValueError(f"{len(labels)} label rows for a batch of {mask.shape[0]}")
    target = np.zeros(mask.shape + (num_classes,))
    for b, row in enumerate(labels):
        positions = np.flatnonzero(mask[b])
        if len(row) != len(positions):
            raise ValueError(f"row {b}: {len(row)} labels for {len(positions)} unmasked tokens")
        if len(row) == 0:
            raise ValueError(f"row {b}: no unmasked tokens to label")
        target[b, positions] = one_hot(row, num_classes)
    return target


def tag_distribution(head: TaskHead, token_states: Tensor) -> Tensor:
    return ad.softmax(head.logits(token_states))


def task_loss_seq(
    token_states: Tensor,
    head: TaskHead,
    labels: Sequence[Sequence[int]],
    mask,
    reduction: str = "sum",
) -> Tensor:
    """Per-token cross-entropy summed over unmasked positions (and the batch)."""
    target = tag_targets(labels, mask, head.num_classes)
    probs = ad.clamp_prob(tag_distribution(head, token_states))
    total = -ad.tsum(ad.mul(ad.log(probs), target))
    return _reduce(total, token_states.shape[0], reduction)


def discriminate(disc: Discriminator, pooled: Tensor) -> Tensor:
    """p(source language | x) per row, clamped to [1e-12, 1 - 1e-12]."""
    if pooled.ndim != 2 or pooled.shape[1] != disc.weight.shape[0]:
        raise ad.ShapeError(f"discriminator expects (B, {disc.weight.shape[0]}), got {pooled.shape}")
    logit = ad.matmul(pooled, disc.weight.reshape(-1, 1)) + disc.bias
    return ad.clamp_prob(ad.sigmoid(logit)).reshape(-1)


def discriminator_loss(p_src: Tensor, lang: Sequence[int], reduction: str = "sum", batch_size: int | None = None) -> Tensor:
    """Binary cross-entropy with the language label as target for ``p_src``.

    ``batch_size`` sets the divisor for ``reduction="mean"``; the trainer
    passes the per-language batch size since each call sees one batch from
    each language.
    """
    p_src = ad.as_tensor(p_src)
    y = np.asarray(lang, dtype=np.float64)
    if y.shape != p_src.shape:
        raise ValueError(f"{y.shape} language labels for {p_src.shape} probabilities")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("language labels must be 0 or 1")
    p_src = ad.clamp_prob(p_src)
    p_tgt = ad.clamp_prob(1.0 - p_src)
    total = -(ad.tsum(ad.mul(ad.log(p_tgt), 1.0 - y)) + ad.tsum(ad.mul(ad.log(p_src), y)))
    return _reduce(total, batch_size or p_src.shape[0], reduction)


def generator_loss(p_src: Tensor, lang: Sequence[int], reduction: str = "sum", batch_size: int | None = None) -> Tensor:
    """The discriminator loss against flipped language labels."""
    flipped = 1 - np.asarray(lang, dtype=np.int64)
    return discriminator_loss(p_src, flipped, reduction, batch_size)
