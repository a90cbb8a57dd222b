"""Mixup virtual pairs and the vicinal (VRM) loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .models import ClassifierModel

DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class MixupPair:
    lam: float
    i: int
    j: int
    mixed_image: np.ndarray
    mixed_label: np.ndarray


@dataclass
class MixupBatch:
    """Column view of a list of :class:`MixupPair`."""

    lam: np.ndarray  # (K,)
    i: np.ndarray
    j: np.ndarray
    images: np.ndarray  # (K, *input_shape)
    labels: np.ndarray  # (K, C + 1)

    def __len__(self) -> int:
        return len(self.lam)

    def __iter__(self) -> Iterator[MixupPair]:
        for k in range(len(self)):
            yield MixupPair(float(self.lam[k]), int(self.i[k]), int(self.j[k]), self.images[k], self.labels[k])

    @classmethod
    def empty(cls, input_shape, num_outputs: int) -> "MixupBatch":
        return cls(
            np.zeros(0),
            np.zeros(0, dtype=int),
            np.zeros(0, dtype=int),
            np.zeros((0,) + tuple(input_shape)),
            np.zeros((0, num_outputs)),
        )


def sample_beta(alpha: float, rng: np.random.Generator, size=None):
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return rng.beta(alpha, alpha, size=size)


def one_hot(labels, num_outputs: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_outputs))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out


def mix(xi, yi, xj, yj, lam: float):
    """(lam * xi + (1 - lam) * xj, lam * yi + (1 - lam) * yj)."""
    return lam * np.asarray(xi) + (1.0 - lam) * np.asarray(xj), lam * np.asarray(yi) + (1.0 - lam) * np.asarray(yj)


def make_mixup(
    images: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    alpha: float,
    rng: np.random.Generator,
    lam: Optional[float] = None,
) -> MixupBatch:
    """One virtual pair per batch element.

    Partners come from a permutation of the batch, so each image is used once
    as first and once as second source. ``labels`` are integer classes < C;
    mixed labels are distributions over C + 1 with no fake-class mass.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n = len(images)
    if n < 2:
        raise ValueError(f"mixup needs a batch of at least 2, got {n}")
    if len(labels) != n:
        raise ValueError(f"{n} images but {len(labels)} labels")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must be in [0, {num_classes})")
    i = rng.permutation(n)
    j = rng.permutation(n)
    if lam is None:
        lams = sample_beta(alpha, rng, size=n)
    else:
        lams = np.full(n, float(lam))
    y = one_hot(labels, num_classes + 1)
    shape = (n,) + (1,) * (images.ndim - 1)
    mixed = lams.reshape(shape) * images[i] + (1.0 - lams.reshape(shape)) * images[j]
    mixed_labels = lams[:, None] * y[i] + (1.0 - lams[:, None]) * y[j]
    return MixupBatch(lams, i, j, mixed, mixed_labels)


def vrm_loss(model: ClassifierModel, real_x, real_y, mix_batch: Optional[MixupBatch] = None) -> T.Tensor:
    """Mean real-label NLL plus mean soft-label NLL on mixup pairs."""
    real_x = np.asarray(real_x, dtype=np.float64)
    if len(real_x) == 0:
        raise ValueError("vrm_loss needs a non-empty real batch")
    loss = T.cross_entropy_soft(model.forward_logits(real_x), one_hot(real_y, model.num_outputs))
    if mix_batch is not None and len(mix_batch):
        _check_labels(mix_batch.labels)
        loss = T.add(loss, T.cross_entropy_soft(model.forward_logits(mix_batch.images), mix_batch.labels))
    return loss


def _check_labels(labels: np.ndarray) -> None:
    if np.any(labels < 0) or np.any(np.abs(labels.sum(-1) - 1.0) > 1e-9):
        raise ValueError("mixup labels must be probability distributions")
