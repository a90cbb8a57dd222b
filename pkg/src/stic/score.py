"""Class-conditional score matching regularizer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .io import Dataset
from .mixup import one_hot
from .models import ScoreModel
from .tensor import DisconnectedInputWarning, Tensor
from .trainer import TrainConfig, TrainResult, model_for, train

EXACT_MAX_DIM = 64


@dataclass(frozen=True)
class TraceEstimator:
    mode: str = "exact"  # exact | stochastic
    probe_count: int = 1

    def __post_init__(self):
        if self.mode not in ("exact", "stochastic"):
            raise ValueError(f"unknown trace mode {self.mode!r}")
        if self.probe_count < 1:
            raise ValueError("probe_count must be at least 1")


def jacobian_trace(
    fn: Callable[[Tensor], Tensor],
    x,
    estimator: TraceEstimator = TraceEstimator(),
    rng: Optional[np.random.Generator] = None,
    batched: bool = False,
    create_graph: bool = False,
) -> Tensor:
    """Trace of d fn(x) / dx.

    With ``batched=True`` the leading axis indexes independent samples and the
    result is the sum of the per-sample traces. Exact mode spends one backward
    pass per coordinate; stochastic mode averages v^T J v over Rademacher
    probes v.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if not x.requires_grad:
        x = Tensor(x.data, requires_grad=True)
    y = fn(x)
    if y.shape != x.shape:
        raise T.ShapeError(f"vector field must map {x.shape} to itself, got {y.shape}")
    per_sample = x.shape[1:] if batched else x.shape
    d = int(np.prod(per_sample))
    total = None
    with warnings.catch_warnings():
        # a constant field is legitimate: its trace is 0
        warnings.simplefilter("ignore", DisconnectedInputWarning)
        if estimator.mode == "exact":
            if d > EXACT_MAX_DIM:
                raise ValueError(f"exact trace limited to dimension {EXACT_MAX_DIM}, got {d}")
            for i in range(d):
                e = np.zeros((len(x.data), d) if batched else (d,))
                e[..., i] = 1.0
                e = Tensor(e.reshape(x.shape))
                (g,) = T.grad(T.sum(T.mul(y, e)), [x], create_graph=create_graph)
                term = T.sum(T.mul(g, e))
                total = term if total is None else T.add(total, term)
        else:
            if rng is None:
                raise ValueError("stochastic trace estimation needs an rng")
            for _ in range(estimator.probe_count):
                v = Tensor(rng.choice([-1.0, 1.0], size=x.shape))
                (g,) = T.grad(T.sum(T.mul(y, v)), [x], create_graph=create_graph)
                term = T.sum(T.mul(g, v))
                total = term if total is None else T.add(total, term)
            total = T.scalar_mul(total, 1.0 / estimator.probe_count)
    return total


def score_reg_terms(
    model: ScoreModel,
    x,
    target_class,
    estimator: TraceEstimator = TraceEstimator(),
    rng: Optional[np.random.Generator] = None,
    create_graph: bool = True,
) -> dict:
    """Batch means of 0.5 |s|^2, tr(ds/dx), and 0.5 |onehot(y) - softmax|^2."""
    if not isinstance(model, ScoreModel):
        raise TypeError("score regularization needs a ScoreModel")
    xb = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if xb.shape == model.input_shape:
        xb = xb[None]
    n = len(xb)
    xt = Tensor(xb, requires_grad=True)
    acts, s = model.run_with_score(xt)
    half_sq = T.scalar_mul(T.sum(T.square(s)), 0.5 / n)

    def field(inp: Tensor) -> Tensor:
        return s if inp is xt else model.score(inp)

    trace = T.scalar_mul(jacobian_trace(field, xt, estimator, rng, batched=True, create_graph=create_graph), 1.0 / n)
    labels = np.broadcast_to(np.asarray(target_class), (n,))
    diff = T.sub(Tensor(one_hot(labels, model.num_outputs)), T.softmax(acts.logits, -1))
    cls = T.scalar_mul(T.sum(T.square(diff)), 0.5 / n)
    return {"score_norm": half_sq, "trace": trace, "class_match": cls}


def score_reg(
    model: ScoreModel,
    x,
    target_class,
    estimator: TraceEstimator = TraceEstimator(),
    rng: Optional[np.random.Generator] = None,
    create_graph: bool = True,
) -> Tensor:
    terms = score_reg_terms(model, x, target_class, estimator, rng, create_graph)
    return T.add(T.add(terms["score_norm"], terms["trace"]), terms["class_match"])


def train_score_stic(
    config: TrainConfig,
    data: Dataset,
    rng: np.random.Generator,
    weight: float = 0.1,
    estimator: Optional[TraceEstimator] = None,
    probe_seed: int = 0,
    **kwargs,
) -> TrainResult:
    """STIC training with ``weight * score_reg`` added on every real batch.

    Probes draw from their own stream, so the main stream (batches, mixup,
    chains) is the same whatever the weight.
    """
    if weight < 0:
        raise ValueError("weight must be nonnegative")
    if estimator is None:
        estimator = TraceEstimator("exact") if int(np.prod(data.shape)) <= 8 else TraceEstimator("stochastic", 1)
    probe_rng = np.random.default_rng([probe_seed, 0x5C0]) if estimator.mode == "stochastic" else None
    if kwargs.get("model") is None:
        kwargs["model"] = model_for(config, data, seed=rng.integers(2**63), score=True)

    def extra(model, x, y):
        return T.scalar_mul(score_reg(model, x, y, estimator, probe_rng), weight)

    return train(config, data, rng, extra_loss=extra, **kwargs)
