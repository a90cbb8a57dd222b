"""Desk-scale sample-quality metrics.

Feature clouds come from the penultimate layer of the artifact's own
classifier, so Fréchet values here are not comparable with numbers computed
on an external inception-style network.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .mixup import one_hot
from .models import build_model
from .optim import Adam
from .samplers import SamplerConfig, initial_states, neighborhood_starts, synthesize

SINGULAR_JITTER = 1e-6


class MetricNotice(UserWarning):
    """A metric had to adjust its input (regularization, excluded classes)."""


@dataclass
class FeatureCloud:
    features: np.ndarray  # (n, d)
    source: str = "real"  # real | generated
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2:
            raise ValueError(f"features must be (n, d), got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValueError("feature cloud has non-finite rows")
        if self.source not in ("real", "generated"):
            raise ValueError(f"unknown source {self.source!r}")
        self.features = f

    def __len__(self) -> int:
        return len(self.features)

    def moments(self) -> tuple:
        if len(self) < 2:
            raise ValueError("need at least 2 rows to fit moments")
        mu = self.features.mean(0)
        sigma = np.atleast_2d(np.cov(self.features, rowvar=False))
        return mu, 0.5 * (sigma + sigma.T)

    @classmethod
    def from_model(cls, model, x, source: str = "real", labels=None, batch: int = 256) -> "FeatureCloud":
        x = np.asarray(x, dtype=np.float64)
        parts = []
        with T.no_grad():
            for s in range(0, len(x), batch):
                parts.append(model.penultimate_features(x[s : s + batch]).data)
        return cls(np.concatenate(parts), source, labels)


def _as_cloud(c) -> FeatureCloud:
    return c if isinstance(c, FeatureCloud) else FeatureCloud(c)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _regularize(sigma: np.ndarray, name: str) -> np.ndarray:
    w = np.linalg.eigvalsh(sigma)
    if w.min() <= 1e-12 * max(w.max(), 1.0):
        warnings.warn(f"covariance {name} is singular; adding {SINGULAR_JITTER:g} * I", MetricNotice, stacklevel=3)
        return sigma + SINGULAR_JITTER * np.eye(len(sigma))
    return sigma


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) for Gaussians with given moments."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, float)), np.atleast_2d(np.asarray(sigma2, float))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (len(mu1), len(mu1)):
        raise ValueError(f"moment shapes disagree: {mu1.shape}, {mu2.shape}, {s1.shape}, {s2.shape}")
    s1, s2 = _regularize(0.5 * (s1 + s1.T), "A"), _regularize(0.5 * (s2 + s2.T), "B")
    # tr (S1 S2)^(1/2) = tr (S1^(1/2) S2 S1^(1/2))^(1/2); the inner matrix is symmetric PSD
    r1 = _psd_sqrt(s1)
    inner = r1 @ s2 @ r1
    cross = float(np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)).sum())
    diff = mu1 - mu2
    return max(float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross), 0.0)


def frechet_distance(a, b) -> float:
    mu1, s1 = _as_cloud(a).moments()
    mu2, s2 = _as_cloud(b).moments()
    return frechet_from_moments(mu1, s1, mu2, s2)


# ---------------------------------------------------------------------------
# k-NN precision / recall
# ---------------------------------------------------------------------------


def _pairwise_sq(a: np.ndarray, b: np.ndarray, chunk: int = 1024):
    for s in range(0, len(a), chunk):
        block = a[s : s + chunk]
        yield s, ((block[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    out = np.empty(len(x))
    for s, d2 in _pairwise_sq(x, x):
        d2 = d2.copy()
        d2[np.arange(len(d2)), np.arange(s, s + len(d2))] = np.inf
        out[s : s + len(d2)] = np.sqrt(np.partition(d2, k - 1, axis=1)[:, k - 1])
    return out


def _coverage(support: np.ndarray, radii: np.ndarray, query: np.ndarray) -> float:
    hit = np.zeros(len(query), dtype=bool)
    for s, d2 in _pairwise_sq(query, support):
        hit[s : s + len(d2)] = (np.sqrt(d2) <= radii[None, :]).any(1)
    return float(hit.mean())


def knn_precision_recall(real, gen, k: int = 3) -> tuple:
    """(precision, recall): generated points inside the real k-NN balls, and vice versa."""
    r, g = _as_cloud(real).features, _as_cloud(gen).features
    if r.shape[1] != g.shape[1]:
        raise ValueError(f"feature widths differ: {r.shape[1]} vs {g.shape[1]}")
    if not 1 <= k < min(len(r), len(g)):
        raise ValueError(f"k must satisfy 1 <= k < {min(len(r), len(g))}, got {k}")
    precision = _coverage(r, knn_radii(r, k), g)
    recall = _coverage(g, knn_radii(g, k), r)
    return precision, recall


# ---------------------------------------------------------------------------
# cross-training accuracy
# ---------------------------------------------------------------------------


def cls_cross(
    train_x,
    train_y,
    test_x,
    test_y,
    template: dict | Callable,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> float:
    """Train a fresh classifier on (train_x, train_y); top-1 accuracy in percent on the test set.

    ``template`` is a model descriptor or a zero-argument factory. Test classes
    absent from the training labels are excluded with a notice.
    """
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y, test_y = np.asarray(train_y, int), np.asarray(test_y, int)
    rng = np.random.default_rng(seed)
    model = template() if callable(template) else build_model(template, seed=rng.integers(2**63))
    C = model.num_real_classes
    missing = sorted(set(test_y.tolist()) - set(train_y.tolist()))
    if missing:
        warnings.warn(f"classes {missing} absent from training set; excluded from accuracy", MetricNotice, stacklevel=2)
        keep = ~np.isin(test_y, missing)
        test_x, test_y = test_x[keep], test_y[keep]
    if len(test_y) == 0:
        raise ValueError("no test rows left to score")
    opt = Adam(model.parameters(), lr=lr)
    n = len(train_x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            loss = T.cross_entropy_soft(model.forward_logits(train_x[idx]), one_hot(train_y[idx], C + 1))
            opt.zero_grad()
            loss.backward()
            opt.step()
    probs = model.predict_proba(test_x)
    return 100.0 * float(np.mean(probs[:, :C].argmax(-1) == test_y))


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def mean_pairwise_distance(x: np.ndarray) -> float:
    x = np.asarray(x, float).reshape(len(x), -1)
    if len(x) < 2:
        return 0.0
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    return float(d[np.triu_indices(len(x), 1)].mean())


def diversity_report(
    model,
    target: int,
    n: int,
    sigma: float,
    config: SamplerConfig,
    rng: np.random.Generator,
    base=None,
) -> dict:
    """Synthesize from n perturbations of one start and from n independent starts."""
    if n < 2:
        raise ValueError("need at least 2 chains per group")
    if base is None:
        base = initial_states("gaussian", 1, model.input_shape, rng)[0]
        if config.clip_to is not None:
            base = np.clip(base, *config.clip_to)
    near0 = np.stack(neighborhood_starts(base, sigma, n, rng))
    far0 = initial_states("gaussian", n, model.input_shape, rng)
    if config.clip_to is not None:
        far0 = np.clip(far0, *config.clip_to)
    given = SamplerConfig(config.eps1, config.eps2, config.eps3, config.steps, config.layers, config.clip_to, "given")
    near = synthesize(model, target, None, given, rng, n, near0).samples
    far = synthesize(model, target, None, given, rng, n, far0).samples
    return {
        "class": int(target),
        "n": int(n),
        "sigma": float(sigma),
        "near_mean_dist": mean_pairwise_distance(near),
        "far_mean_dist": mean_pairwise_distance(far),
    }


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------


def append_metrics_csv(path, run_id: str, results: dict) -> None:
    """Append one ``run_id, metric, value`` row per entry; writes a header on a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["run_id", "metric", "value"])
        for k, v in results.items():
            w.writerow([run_id, k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])
