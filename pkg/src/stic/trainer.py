"""Recurrent self-analysis training.

Each pass trains the classifier on real and mixup pairs (positives) and on
samples synthesized by the previous pass's classifier (negatives labeled with
the fake class), then refreshes the synthesized buffers with the new model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .io import Dataset, save_checkpoint
from .mixup import MixupBatch, make_mixup, one_hot
from .models import ClassifierModel, cnn, mlp
from .optim import Adam, step_decay_lr
from .samplers import (
    ChainFailure,
    GramTarget,
    SamplerConfig,
    class_gram_target,
    grmala_step,
    mix_gram_targets,
    gram_target_from_images,
    Chain,
)

logger = logging.getLogger(__name__)

ExtraLoss = Callable[[ClassifierModel, np.ndarray, np.ndarray], T.Tensor]


@dataclass
class TrainConfig:
    passes: int = 10
    iterations_per_pass: int = 5000
    batch_size: int = 32  # N: real batch, and the real mixup batch unless overridden
    fake_batch_size: int = 32  # K
    mixup_batch_size: Optional[int] = None  # None -> batch_size; 0 drops every mixup term
    lr: float = 1e-4
    lr_decay: float = 0.3
    decay_interval: int = 10000
    chain_restart_prob: float = 0.5
    noise_std: float = 0.3
    alpha: float = 1.0
    buffer_size: Optional[int] = None  # None -> K * iterations_per_pass / refresh_stride
    refresh_stride: int = 100
    arch: str = "auto"  # auto | mlp | cnn
    hidden: tuple = (64, 64)
    channels: tuple = (8, 16, 32)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        positive = ("passes", "batch_size", "fake_batch_size", "lr", "decay_interval", "alpha", "refresh_stride")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("iterations_per_pass", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.chain_restart_prob <= 1.0:
            raise ValueError("chain_restart_prob must lie in [0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.mixup_batch_size is not None and self.mixup_batch_size < 0:
            raise ValueError("mixup_batch_size must be nonnegative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small profile: 3 passes of 500 iterations, N = K = 32."""
        return cls(**{"passes": 3, "iterations_per_pass": 500, "batch_size": 32, "fake_batch_size": 32, **overrides})

    @property
    def n_mixup(self) -> int:
        return self.batch_size if self.mixup_batch_size is None else self.mixup_batch_size

    @property
    def n_buffer(self) -> int:
        if self.buffer_size is not None:
            return self.buffer_size
        return self.fake_batch_size * max(1, self.iterations_per_pass // self.refresh_stride)


@dataclass
class FakeBuffer:
    """Synthesized negatives plus what each chain was conditioned on."""

    x: np.ndarray
    targets: np.ndarray  # (n, C + 1) conditioning distribution of each chain
    produced_by: int  # pass whose classifier made them (0: blank warm-up images)

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class PassState:
    tau: int  # the pass about to run, 1-based
    model: ClassifierModel
    optimizer: Adam
    fake_hard: FakeBuffer
    fake_mixup: FakeBuffer
    iteration: int = 0  # global, drives the lr schedule
    losses: list = field(default_factory=list)  # per-iteration losses of every pass run so far


@dataclass
class TrainResult:
    model: ClassifierModel
    metrics: list  # one dict per pass
    snapshots: list  # state_dict after each pass
    state: PassState


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------


def preprocess(raw, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """[0, 255] -> [-1, 1], add N(0, noise_std^2), clip back to [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0) or np.any(raw > 255):
        raise ValueError("raw pixel values must lie in [0, 255]")
    x = raw / 127.5 - 1.0
    if noise_std > 0:
        x = x + noise_std * rng.standard_normal(x.shape)
    return np.clip(x, -1.0, 1.0)


def real_inputs(data: Dataset, idx, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if data.kind == "points":
        return data.images[idx]
    return preprocess(data.images[idx], noise_std, rng)


def clean_inputs(data: Dataset) -> np.ndarray:
    if data.kind == "points":
        return data.images
    return data.images / 127.5 - 1.0


def data_box(data: Dataset, margin: float = 0.25) -> tuple:
    """Range chains live in: [-1, 1] for images, the padded data extent for points."""
    if data.kind != "points":
        return (-1.0, 1.0)
    lo, hi = float(data.images.min()), float(data.images.max())
    pad = margin * (hi - lo)
    return (lo - pad, hi + pad)


def sampler_for(data: Dataset, config: SamplerConfig) -> SamplerConfig:
    """Point data clips to its padded extent instead of [-1, 1]."""
    if data.kind == "points" and config.clip_to is not None:
        return replace(config, clip_to=data_box(data))
    return config


def model_for(config: TrainConfig, data: Dataset, seed, score: bool = False) -> ClassifierModel:
    arch = config.arch
    if arch == "auto":
        arch = "mlp" if data.kind == "points" else "cnn"
    if arch == "mlp":
        if data.kind == "points":
            return mlp(int(np.prod(data.shape)), data.num_classes, config.hidden, seed=seed, score=score)
        return _flat_mlp(data, config, seed, score)
    return cnn(data.shape, data.num_classes, config.channels, seed=seed, score=score)


def _flat_mlp(data: Dataset, config: TrainConfig, seed, score: bool):
    desc = {"kind": "mlp", "input_shape": list(data.shape), "hidden": list(config.hidden), "num_classes": data.num_classes}
    from .models import ScoreModel

    return ScoreModel(desc, seed) if score else ClassifierModel(desc, seed)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def pass_loss(
    model: ClassifierModel,
    real_x,
    real_y,
    mix_batch: Optional[MixupBatch] = None,
    fake_x=None,
    fake_mix_x=None,
) -> T.Tensor:
    """Mean NLL of real labels, mixup labels, and the fake class on both fake batches."""
    real_x = np.asarray(real_x, dtype=np.float64)
    if len(real_x) == 0:
        raise ValueError("pass_loss needs a non-empty real batch")
    C1 = model.num_outputs
    loss = T.cross_entropy_soft(model.forward_logits(real_x), one_hot(real_y, C1))
    if mix_batch is not None and len(mix_batch):
        if np.any(mix_batch.labels[:, model.fake_class_index] != 0):
            raise ValueError("mixup positives must not carry fake-class mass")
        loss = T.add(loss, T.cross_entropy_soft(model.forward_logits(mix_batch.images), mix_batch.labels))
    for fx in (fake_x, fake_mix_x):
        if fx is not None and len(fx):
            fake_t = one_hot(np.full(len(fx), model.fake_class_index), C1)
            loss = T.add(loss, T.cross_entropy_soft(model.forward_logits(np.asarray(fx)), fake_t))
    return loss


# ---------------------------------------------------------------------------
# buffers
# ---------------------------------------------------------------------------


def _draw(buf: FakeBuffer, k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 0 or len(buf) == 0:
        return buf.x[:0]
    idx = rng.choice(len(buf), size=k, replace=len(buf) < k)
    return buf.x[idx]


def initial_state(model: ClassifierModel, config: TrainConfig, data: Dataset) -> PassState:
    n = config.n_buffer
    shape = model.input_shape
    # blank images (pixel value 255 -> +1) stand in for both fake buffers before the first refresh
    C = data.num_classes
    hard = FakeBuffer(np.ones((n,) + shape), one_hot(np.arange(n) % C, C + 1), produced_by=0)
    if config.n_mixup:
        mixup = FakeBuffer(np.ones((n,) + shape), hard.targets.copy(), produced_by=0)
    else:
        mixup = FakeBuffer(np.zeros((0,) + shape), np.zeros((0, C + 1)), produced_by=0)
    return PassState(1, model, Adam(model.parameters(), lr=config.lr), hard, mixup)


def _restart(prev: np.ndarray, n: int, shape, box, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Continue from previous end states, re-drawing each uniformly in ``box`` with prob ``chain_restart_prob``."""
    fresh = rng.uniform(box[0], box[1], size=(n,) + tuple(shape))
    if len(prev) == 0:
        return fresh
    start = prev[np.arange(n) % len(prev)].copy()
    redo = rng.uniform(size=n) < config.chain_restart_prob
    start[redo] = fresh[redo]
    return start


def _run_chains(model, x0, targets, gram: Optional[GramTarget], sconf: SamplerConfig, rng) -> np.ndarray:
    chain = Chain(x0, targets, rng)
    for _ in range(sconf.steps):
        chain = grmala_step(chain, model, gram, sconf)
    if len(chain.x) and chain.failed.all():
        raise ChainFailure("every chain failed")
    # failed rows keep their last finite state
    return chain.x


def refresh_buffers(state: PassState, config: TrainConfig, data: Dataset, rng: np.random.Generator) -> tuple:
    """Synthesize new hard and mixup fake buffers from ``state.model``."""
    model = state.model
    C = data.num_classes
    n = config.n_buffer
    shape = model.input_shape
    sconf = sampler_for(data, config.sampler)
    box = sconf.clip_to if sconf.clip_to is not None else data_box(data)
    use_gram = bool(model.conv_layers) and sconf.eps2 > 0
    clean = clean_inputs(data)
    tag = state.tau

    classes = np.arange(n) % C
    hard_t = one_hot(classes, C + 1)
    x0 = _restart(state.fake_hard.x, n, shape, box, config, rng)
    gram = class_gram_target(model, clean, data.labels, classes, rng, sconf.layers) if use_gram else None
    hard = FakeBuffer(_run_chains(model, x0, hard_t, gram, sconf, rng), hard_t, tag)

    if config.n_mixup == 0:
        return hard, FakeBuffer(np.zeros((0,) + shape), np.zeros((0, C + 1)), tag)
    i = rng.integers(len(data), size=n)
    j = rng.integers(len(data), size=n)
    lam = rng.beta(config.alpha, config.alpha, size=n)
    mix_t = lam[:, None] * one_hot(data.labels[i], C + 1) + (1 - lam[:, None]) * one_hot(data.labels[j], C + 1)
    x0 = _restart(state.fake_mixup.x, n, shape, box, config, rng)
    gram = None
    if use_gram:
        a = gram_target_from_images(model, clean[i], sconf.layers)
        b = gram_target_from_images(model, clean[j], sconf.layers)
        gram = mix_gram_targets(a, b, lam)
    mixed = FakeBuffer(_run_chains(model, x0, mix_t, gram, sconf, rng), mix_t, tag)
    return hard, mixed


# ---------------------------------------------------------------------------
# passes
# ---------------------------------------------------------------------------


def train_accuracy(model: ClassifierModel, data: Dataset) -> float:
    """Top-1 accuracy with the prediction restricted to the real classes."""
    probs = model.predict_proba(clean_inputs(data))
    return float(np.mean(probs[:, : model.num_real_classes].argmax(-1) == data.labels))


def boundary_tightness(model: ClassifierModel, low, high, n: int, rng: np.random.Generator) -> float:
    """Mean over uniform inputs of the largest real-class softmax probability."""
    x = rng.uniform(low, high, size=(n,) + model.input_shape)
    probs = model.predict_proba(x)
    return float(probs[:, : model.num_real_classes].max(-1).mean())


def run_pass(
    state: PassState,
    config: TrainConfig,
    data: Dataset,
    rng: np.random.Generator,
    extra_loss: Optional[ExtraLoss] = None,
) -> tuple:
    """Train one pass, then refresh the fake buffers. Returns (new state, metrics row)."""
    for buf in (state.fake_hard, state.fake_mixup):
        if len(buf) and buf.produced_by != state.tau - 1:
            raise RuntimeError(f"buffer made by pass {buf.produced_by} consumed at pass {state.tau}")
    model = state.model
    opt = state.optimizer
    C = data.num_classes
    it = state.iteration
    losses = []
    for _ in range(config.iterations_per_pass):
        opt.lr = step_decay_lr(it, config.lr, config.lr_decay, config.decay_interval)
        idx = rng.integers(len(data), size=config.batch_size)
        x = real_inputs(data, idx, config.noise_std, rng)
        y = data.labels[idx]
        mix = None
        if config.n_mixup == config.batch_size:
            mix = make_mixup(x, y, C, config.alpha, rng)
        elif config.n_mixup:
            idx_m = rng.integers(len(data), size=config.n_mixup)
            xm = real_inputs(data, idx_m, config.noise_std, rng)
            mix = make_mixup(xm, data.labels[idx_m], C, config.alpha, rng)
        fake = _draw(state.fake_hard, config.fake_batch_size, rng)
        fake_mix = _draw(state.fake_mixup, config.fake_batch_size if config.n_mixup else 0, rng)
        loss = pass_loss(model, x, y, mix, fake, fake_mix)
        opt.zero_grad()
        loss.backward()
        total = loss.item()
        if extra_loss is not None:
            # separate backward: a zero-weight term must leave the gradients bit-identical
            extra = extra_loss(model, x, y)
            extra.backward()
            total += extra.item()
        opt.step()
        losses.append(total)
        it += 1

    consumed = state.fake_hard
    state = replace(state, iteration=it, losses=state.losses + [losses])
    try:
        hard, mixed = refresh_buffers(state, config, data, rng)
    except ChainFailure as err:
        logger.warning("buffer refresh failed at pass %d: %s", state.tau, err)
        hard = replace(state.fake_hard, produced_by=state.tau)
        mixed = replace(state.fake_mixup, produced_by=state.tau)
    with T.no_grad():
        fake_prob = (
            float(model.predict_proba(consumed.x)[:, model.fake_class_index].mean()) if len(consumed) else 0.0
        )
    row = {
        "pass": state.tau,
        "iter": it,
        "loss": float(np.mean(losses)) if losses else float("nan"),
        "train_acc": train_accuracy(model, data),
        "mean_fake_prob": fake_prob,
    }
    logger.info("pass %d: loss=%.4f acc=%.3f", row["pass"], row["loss"], row["train_acc"])
    return replace(state, tau=state.tau + 1, fake_hard=hard, fake_mixup=mixed), row


def train(
    config: TrainConfig,
    data: Dataset,
    rng: np.random.Generator,
    model: Optional[ClassifierModel] = None,
    checkpoint_dir=None,
    seed: int = 0,
    extra_loss: Optional[ExtraLoss] = None,
) -> TrainResult:
    """Run ``config.passes`` passes; optionally writes ``pass{τ}.stic`` per pass."""
    if model is None:
        model = model_for(config, data, seed=rng.integers(2**63))
    state = initial_state(model, config, data)
    metrics, snapshots = [], []
    for _ in range(config.passes):
        state, row = run_pass(state, config, data, rng, extra_loss)
        metrics.append(row)
        snapshots.append(state.model.state_dict())
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"pass{row['pass']}.stic", state.model, row["pass"], seed)
    return TrainResult(state.model, metrics, snapshots, state)


def ablate_erm(config: TrainConfig, data: Dataset, rng: np.random.Generator, **kwargs) -> TrainResult:
    """Same loop with every mixup term removed."""
    return train(replace(config, mixup_batch_size=0), data, rng, **kwargs)


METRICS_FIELDS = ("pass", "iter", "loss", "train_acc", "mean_fake_prob")


def write_metrics_csv(path, metrics) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(METRICS_FIELDS))
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRICS_FIELDS})
