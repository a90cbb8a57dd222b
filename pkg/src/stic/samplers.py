"""Gram-regularized Langevin sampling from classifier logits.

The GRMALA step reads::

    x <- clip(x + eps1 * grad log p(target | x) - eps2 * grad style(x) + eps3 * z)

with ``z ~ N(0, I)``. The style term is a descent direction on the Gram
mismatch loss, not the raw squared mismatch added to ``x``: the latter is a
scalar and cannot be added to an image.

Chains are batched: one :class:`Chain` carries B independent states and one
rng stream. Since no model normalizes across the batch, the gradient of the
summed objective is the per-state gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .models import ClassifierModel
from .tensor import Tensor

Target = Union[int, np.ndarray, None]  # class, distribution(s) over C + 1, or None for the marginal


@dataclass
class SamplerConfig:
    eps1: float = 0.95
    eps2: float = 0.95
    eps3: float = 0.015
    steps: int = 20
    layers: Optional[list] = None  # None -> the model's two deepest conv blocks
    clip_to: Optional[tuple] = (-1.0, 1.0)
    init: str = "gaussian"  # gaussian | blank | given

    def __post_init__(self):
        for name in ("eps1", "eps2", "eps3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.init not in ("gaussian", "blank", "given"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.clip_to is not None:
            lo, hi = self.clip_to
            if lo >= hi:
                raise ValueError(f"clip_to must be an increasing pair, got {self.clip_to}")
            self.clip_to = (float(lo), float(hi))


@dataclass
class GramTarget:
    """Reference Gram matrices, one array per layer, shaped (N_L, N_L) or (B, N_L, N_L)."""

    layers: list
    grams: list
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != len(self.grams):
            raise ValueError("one Gram matrix per layer required")


@dataclass
class Chain:
    x: np.ndarray  # (B, *input_shape)
    target: Target
    rng: np.random.Generator
    t: int = 0
    failed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64)
        if self.failed is None:
            self.failed = np.zeros(len(self.x), dtype=bool)


@dataclass
class SynthesisResult:
    samples: np.ndarray
    trajectory: list  # dicts: step, log_cond, style_loss (batch means)
    failed: np.ndarray


class ChainFailure(RuntimeError):
    """Every state in a chain produced a non-finite gradient."""


# ---------------------------------------------------------------------------
# Gram statistics
# ---------------------------------------------------------------------------


def gram_matrix(F) -> Tensor:
    """G = F F^T for F of shape (N, M) or (B, N, M)."""
    F = F if isinstance(F, Tensor) else Tensor(F)
    if F.ndim not in (2, 3):
        raise T.ShapeError(f"gram_matrix expects (N, M) or (B, N, M), got {F.shape}")
    perm = (1, 0) if F.ndim == 2 else (0, 2, 1)
    return T.matmul(F, T.transpose(F, perm))


def gram_target_from_images(
    model: ClassifierModel, images: np.ndarray, layers: Optional[Sequence[int]] = None, source: Optional[dict] = None
) -> GramTarget:
    layers = model.default_gram_layers if layers is None else list(layers)
    with T.no_grad():
        fmaps = model.feature_maps(np.asarray(images, dtype=np.float64), layers)
        grams = [gram_matrix(f).data for f in fmaps]
    return GramTarget(list(layers), grams, dict(source or {}))


def mix_gram_targets(a: GramTarget, b: GramTarget, lam) -> GramTarget:
    """lam * A + (1 - lam) * B per layer; ``lam`` may be per-chain."""
    if a.layers != b.layers:
        raise ValueError(f"layer sets differ: {a.layers} vs {b.layers}")
    lam = np.asarray(lam, dtype=np.float64)
    grams = []
    for ga, gb in zip(a.grams, b.grams):
        w = lam.reshape(lam.shape + (1, 1)) if lam.ndim else lam
        grams.append(w * ga + (1.0 - w) * gb)
    return GramTarget(list(a.layers), grams, {"mix": True, "lam": lam.tolist(), "a": a.source, "b": b.source})


def _style_terms(fmaps: Sequence[Tensor], target: GramTarget) -> Tensor:
    """Per-sample sum over layers of sum_ij (G - A)^2 / (4 N^2 M^2)."""
    total = None
    for f, A in zip(fmaps, target.grams):
        n_l, m = f.shape[1], f.shape[2]
        G = gram_matrix(f)
        A = np.asarray(A, dtype=np.float64)
        if A.shape[-2:] != (n_l, n_l):
            raise T.ShapeError(f"Gram target {A.shape} does not match feature maps with {n_l} filters")
        A = np.broadcast_to(A, G.shape)
        term = T.scalar_mul(T.sum(T.square(T.sub(G, Tensor(A))), (1, 2)), 1.0 / (4.0 * n_l**2 * m**2))
        total = term if total is None else T.add(total, term)
    return total


def style_loss(x, model: ClassifierModel, target: GramTarget, layers: Optional[Sequence[int]] = None) -> Tensor:
    """Gram mismatch summed over layers and over the batch (scalar)."""
    layers = target.layers if layers is None else list(layers)
    if list(layers) != list(target.layers):
        raise ValueError(f"layer selection {list(layers)} does not match target layers {target.layers}")
    return T.sum(_style_terms(model.feature_maps(x, layers), target))


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


def _target_logprob(model: ClassifierModel, logits: Tensor, target: Target) -> Tensor:
    if target is None:
        return T.logsumexp(logits, -1)
    t = model._target_matrix(target, logits.shape)
    return T.sum(T.mul(Tensor(t), T.log_softmax(logits, -1)), -1)


def _advance(chain: Chain, drift: np.ndarray, noise_scale: float, rng, clip_to) -> Chain:
    z = rng.standard_normal(chain.x.shape)
    finite = np.isfinite(drift.reshape(len(drift), -1)).all(axis=1)
    failed = chain.failed | ~finite
    new_x = chain.x + np.where(_rows(finite, chain.x), drift, 0.0) + noise_scale * z
    if clip_to is not None:
        new_x = np.clip(new_x, clip_to[0], clip_to[1])
    new_x = np.where(_rows(failed, chain.x), chain.x, new_x)
    return Chain(new_x, chain.target, chain.rng, chain.t + 1, failed)


def _rows(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    return mask.reshape((-1,) + (1,) * (like.ndim - 1))


def grmala_step(
    chain: Chain,
    model: ClassifierModel,
    gram_target: Optional[GramTarget],
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    record: Optional[list] = None,
) -> Chain:
    """One GRMALA transition; rows with non-finite gradients are frozen and flagged."""
    rng = chain.rng if rng is None else rng
    x = Tensor(chain.x, requires_grad=True)
    acts = model.run(x)
    logp = _target_logprob(model, acts.logits, chain.target)
    (g_logp,) = T.grad(T.sum(logp), [x])
    drift = config.eps1 * g_logp.data
    style_val = np.zeros(len(chain.x))
    use_style = gram_target is not None and config.eps2 > 0
    if use_style:
        layers = config.layers if config.layers is not None else gram_target.layers
        if list(layers) != list(gram_target.layers):
            raise ValueError(f"layer selection {list(layers)} does not match target layers {gram_target.layers}")
        style = _style_terms([_flat_map(acts.maps[L]) for L in layers], gram_target)
        (g_style,) = T.grad(T.sum(style), [x])
        drift = drift - config.eps2 * g_style.data
        style_val = style.data
    if record is not None:
        record.append(
            {"step": chain.t, "log_cond": float(np.mean(logp.data)), "style_loss": float(np.mean(style_val))}
        )
    return _advance(chain, drift, config.eps3, rng, config.clip_to)


def _flat_map(m: Tensor) -> Tensor:
    return T.reshape(m, (m.shape[0], m.shape[1], m.shape[2] * m.shape[3]))


def mala_approx_step(
    chain: Chain,
    log_density: Union[ClassifierModel, Callable[[Tensor], Tensor]],
    eps1: float,
    eps2: float,
    rng: Optional[np.random.Generator] = None,
    clip_to=None,
) -> Chain:
    """x + eps1 * grad log p(x) + N(0, eps2^2), no accept/reject.

    A classifier's log density is its unnormalized log marginal (logsumexp of
    the logits); any callable mapping a batch to per-sample log densities works.
    """
    rng = chain.rng if rng is None else rng
    x = Tensor(chain.x, requires_grad=True)
    if isinstance(log_density, ClassifierModel):
        logp = T.logsumexp(log_density.run(x).logits, -1)
    else:
        logp = log_density(x)
    (g,) = T.grad(T.sum(logp), [x])
    return _advance(chain, eps1 * g.data, eps2, rng, clip_to)


def initial_states(init: str, n: int, shape, rng: np.random.Generator, x0=None) -> np.ndarray:
    if init == "gaussian":
        return rng.standard_normal((n,) + tuple(shape))
    if init == "blank":
        # a 255-valued image maps to +1 after [-1, 1] scaling
        return np.ones((n,) + tuple(shape))
    if init == "given":
        if x0 is None:
            raise ValueError("init='given' needs x0")
        x0 = np.array(x0, dtype=np.float64)
        return x0.reshape((-1,) + tuple(shape))
    raise ValueError(f"unknown init {init!r}")


def synthesize(
    model: ClassifierModel,
    target: Target,
    gram_target: Optional[GramTarget],
    config: SamplerConfig,
    rng: np.random.Generator,
    n: int = 1,
    x0=None,
) -> SynthesisResult:
    """Run ``config.steps`` GRMALA steps from the configured start."""
    x = initial_states(config.init, n, model.input_shape, rng, x0)
    if config.clip_to is not None and config.init != "given":
        x = np.clip(x, *config.clip_to)
    chain = Chain(x, target, rng)
    trajectory: list = []
    for _ in range(config.steps):
        chain = grmala_step(chain, model, gram_target, config, record=trajectory)
    if config.steps:
        with T.no_grad():
            acts = model.run(chain.x)
            logp = _target_logprob(model, acts.logits, target).data
            style = np.zeros(len(chain.x))
            if gram_target is not None and config.eps2 > 0:
                style = _style_terms([_flat_map(acts.maps[L]) for L in gram_target.layers], gram_target).data
        trajectory.append({"step": chain.t, "log_cond": float(logp.mean()), "style_loss": float(style.mean())})
    if chain.failed.all() and len(chain.x):
        raise ChainFailure("all chains produced non-finite gradients")
    return SynthesisResult(chain.x, trajectory, chain.failed)


def write_trajectory_csv(path, trajectory: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "log_cond", "style_loss"])
        w.writeheader()
        for row in trajectory:
            w.writerow({k: row[k] for k in ("step", "log_cond", "style_loss")})


# ---------------------------------------------------------------------------
# reference-image selection for Gram targets
# ---------------------------------------------------------------------------


def class_gram_target(
    model: ClassifierModel,
    images: np.ndarray,
    labels: np.ndarray,
    classes: Sequence[int],
    rng: np.random.Generator,
    layers: Optional[Sequence[int]] = None,
) -> GramTarget:
    """Per-chain Gram target from one real image of each chain's class."""
    labels = np.asarray(labels)
    picks = []
    for c in classes:
        pool = np.flatnonzero(labels == c)
        if len(pool) == 0:
            raise ValueError(f"no real image of class {c}")
        picks.append(int(rng.choice(pool)))
    target = gram_target_from_images(model, images[picks], layers)
    target.source = {"kind": "class", "classes": [int(c) for c in classes], "indices": picks}
    return target


def mixup_gram_target(
    model: ClassifierModel,
    images: np.ndarray,
    idx_i: Sequence[int],
    idx_j: Sequence[int],
    lam: np.ndarray,
    layers: Optional[Sequence[int]] = None,
) -> GramTarget:
    a = gram_target_from_images(model, images[list(idx_i)], layers, {"indices": list(map(int, idx_i))})
    b = gram_target_from_images(model, images[list(idx_j)], layers, {"indices": list(map(int, idx_j))})
    return mix_gram_targets(a, b, lam)


# ---------------------------------------------------------------------------
# interpolation and neighborhoods
# ---------------------------------------------------------------------------


def interpolate(sample_a, sample_b, n_points: int) -> list:
    """Convex combinations at weights linspace(0, 1, n_points)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeError(f"interpolate: shape mismatch {a.shape} vs {b.shape}")
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    out = []
    for w in np.linspace(0.0, 1.0, n_points):
        out.append(a.copy() if w == 0 else b.copy() if w == 1 else (1.0 - w) * a + w * b)
    return out


def refine_interpolation(
    samples: Sequence[np.ndarray],
    model: ClassifierModel,
    class_a: int,
    class_b: int,
    config: SamplerConfig,
    rng: np.random.Generator,
    steps: int = 0,
    gram_target: Optional[GramTarget] = None,
) -> np.ndarray:
    """Optional GRMALA polish toward the matching soft class mixture."""
    x = np.stack(samples)
    if steps == 0:
        return x
    w = np.linspace(0.0, 1.0, len(x))
    t = np.zeros((len(x), model.num_outputs))
    t[:, class_a] += 1.0 - w
    t[:, class_b] += w
    chain = Chain(x, t, rng)
    for _ in range(steps):
        chain = grmala_step(chain, model, gram_target, config)
    return chain.x


def neighborhood_starts(x, sigma: float, count: int, rng: np.random.Generator) -> list:
    """``count`` draws of x + N(0, sigma^2 I)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return [x + sigma * rng.standard_normal(x.shape) for _ in range(count)]
