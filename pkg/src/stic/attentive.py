"""Feature-space STIC: attention-read encoder, feature classifier, decoder.

The encoder takes ``glimpses`` looks at an image through a k x k grid of
Gaussian filters whose placement is projected from the previous read vector,
and feeds each read through an LSTM cell. The final hidden state is the
feature vector. Classification, synthesis and fake negatives all live in
feature space; the decoder maps sampled features back to images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .io import Dataset, save_checkpoint
from .mixup import make_mixup, one_hot
from .models import Activations, ClassifierModel, glorot_uniform
from .optim import Adam, step_decay_lr
from .samplers import Chain, ChainFailure, SamplerConfig, grmala_step
from .tensor import Tensor
from .trainer import TrainConfig, TrainResult, real_inputs, train_accuracy

logger = logging.getLogger(__name__)

DEFAULT_FEATURE_WIDTH = 100
DEFAULT_GLIMPSES = 4


def attentive_descriptor(
    input_shape,
    num_classes: int,
    feature_width: int = DEFAULT_FEATURE_WIDTH,
    glimpses: int = DEFAULT_GLIMPSES,
    read_size: Optional[int] = None,
    read_width: int = 32,
    hidden=(64,),
    decoder_channels=(16, 8),
) -> dict:
    input_shape = [int(s) for s in input_shape]
    if len(input_shape) != 3:
        raise ValueError(f"attentive model needs (C, H, W) images, got {input_shape}")
    side = max(input_shape[1:])
    return {
        "kind": "attentive",
        "input_shape": input_shape,
        "num_classes": int(num_classes),
        "feature_width": int(feature_width),
        "glimpses": int(glimpses),
        "read_size": int(read_size if read_size is not None else min(5, side)),
        "read_width": int(read_width),
        "hidden": [int(h) for h in hidden],
        "decoder_channels": [int(c) for c in decoder_channels],
    }


# ---------------------------------------------------------------------------
# attention read
# ---------------------------------------------------------------------------


def filterbank(center: Tensor, delta: Tensor, sigma2: Tensor, k: int, size: int) -> Tensor:
    """(B, k, size) Gaussian filters; each row is normalized to sum to 1.

    Filter i is centred at ``center + (i - (k - 1) / 2) * delta`` in pixel
    coordinates.
    """
    b = center.shape[0]
    offsets = Tensor(np.broadcast_to(np.arange(k) - (k - 1) / 2.0, (b, k)).copy())
    c = T.expand(T.reshape(center, (b, 1)), (b, k))
    d = T.expand(T.reshape(delta, (b, 1)), (b, k))
    mu = T.add(c, T.mul(offsets, d))
    grid = Tensor(np.broadcast_to(np.arange(size, dtype=np.float64), (b, k, size)).copy())
    diff = T.sub(T.expand(T.reshape(mu, (b, k, 1)), (b, k, size)), grid)
    s2 = T.expand(T.reshape(sigma2, (b, 1, 1)), (b, k, size))
    return T.softmax(T.neg(T.div(T.square(diff), T.scalar_mul(s2, 2.0))), -1)


@dataclass
class Placement:
    """Attention parameters per sample: grid centre, stride, variance, intensity."""

    gx: Tensor
    gy: Tensor
    delta: Tensor
    sigma2: Tensor
    gamma: Tensor


def placement_from(raw: Tensor, height: int, width: int, k: int) -> Placement:
    """Map the 5 raw projection outputs to a placement; zeros give a centred full view."""
    col = lambda j: T.index(raw, (slice(None), j))  # noqa: E731
    gx = T.scalar_mul(T.add_scalar(col(0), 1.0), (width - 1) / 2.0)
    gy = T.scalar_mul(T.add_scalar(col(1), 1.0), (height - 1) / 2.0)
    delta = T.scalar_mul(T.exp(col(3)), (max(height, width) - 1) / max(k - 1, 1))
    return Placement(gx, gy, delta, T.exp(col(2)), T.exp(col(4)))


def read_patches(x: Tensor, place: Placement, k: int) -> Tensor:
    """gamma * F_y x F_x^T per channel, flattened to (B, channels * k * k)."""
    b, ch, h, w = x.shape
    fy = filterbank(place.gy, place.delta, place.sigma2, k, h)
    fx = filterbank(place.gx, place.delta, place.sigma2, k, w)
    fxt = T.transpose(fx, (0, 2, 1))
    parts = []
    for c in range(ch):
        img = T.index(x, (slice(None), c))
        parts.append(T.reshape(T.matmul(T.matmul(fy, img), fxt), (b, k * k)))
    patch = parts[0] if ch == 1 else T.concat(parts, 1)
    g = T.expand(T.reshape(place.gamma, (b, 1)), patch.shape)
    return T.mul(g, patch)


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------


class _Module:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _dense(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        self._add(f"{name}.w", glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
        self._add(f"{name}.b", np.zeros(fan_out))

    def _apply(self, name: str, h: Tensor) -> Tensor:
        return T.bias_add(T.matmul(h, self.params[f"{name}.w"]), self.params[f"{name}.b"])


class AttentiveEncoder(_Module):
    def __init__(self, desc: dict, rng: np.random.Generator):
        super().__init__()
        self.input_shape = tuple(desc["input_shape"])
        self.k = int(desc["read_size"])
        self.glimpses = int(desc["glimpses"])
        self.read_width = int(desc["read_width"])
        self.feature_width = int(desc["feature_width"])
        if self.k < 1 or self.glimpses < 1:
            raise ValueError("read_size and glimpses must be at least 1")
        ch = self.input_shape[0]
        glimpse_dim = 2 * ch * self.k * self.k
        self._dense(rng, "attn", self.read_width, 5)
        self._dense(rng, "read", glimpse_dim + self.read_width, self.read_width)
        self._dense(rng, "lstm", self.read_width + self.feature_width, 4 * self.feature_width)

    def placement(self, v_prev: Tensor) -> Placement:
        _, h, w = self.input_shape
        return placement_from(self._apply("attn", v_prev), h, w, self.k)

    def read(self, x: Tensor, x_err: Tensor, v_prev: Tensor) -> Tensor:
        place = self.placement(v_prev)
        glimpse = T.concat([read_patches(x, place, self.k), read_patches(x_err, place, self.k)], 1)
        return T.tanh(self._apply("read", T.concat([glimpse, v_prev], 1)))

    def lstm(self, v: Tensor, h: Tensor, c: Tensor) -> tuple:
        F = self.feature_width
        z = self._apply("lstm", T.concat([v, h], 1))
        gate = lambda j: T.index(z, (slice(None), slice(j * F, (j + 1) * F)))  # noqa: E731
        i, f, o, g = T.sigmoid(gate(0)), T.sigmoid(gate(1)), T.sigmoid(gate(2)), T.tanh(gate(3))
        c = T.add(T.mul(f, c), T.mul(i, g))
        return T.mul(o, T.tanh(c)), c

    def encode(self, x: Tensor, steps: Optional[int] = None) -> Tensor:
        steps = self.glimpses if steps is None else steps
        if steps < 1:
            raise ValueError("encode needs at least one glimpse")
        b = x.shape[0]
        v = Tensor(np.zeros((b, self.read_width)))
        h = Tensor(np.zeros((b, self.feature_width)))
        c = Tensor(np.zeros((b, self.feature_width)))
        x_err = Tensor(np.zeros(x.shape))
        for _ in range(steps):
            x_err = T.sub(x, T.sigmoid(x_err))
            v = self.read(x, x_err, v)
            h, c = self.lstm(v, h, c)
        return h


class Decoder(_Module):
    """Dense layer to a small map, stride-2 transposed convolutions, tanh."""

    def __init__(self, desc: dict, rng: np.random.Generator):
        super().__init__()
        self.output_shape = tuple(desc["input_shape"])
        self.feature_width = int(desc["feature_width"])
        ch, h, w = self.output_shape
        chans = list(desc["decoder_channels"])
        n_up = 0
        while n_up < len(chans) and h % 2 ** (n_up + 1) == 0 and w % 2 ** (n_up + 1) == 0:
            n_up += 1
        self.base = (h // 2**n_up, w // 2**n_up)
        chans = chans[:n_up] if n_up else [ch]
        self.stack = chans + [ch] if n_up else [ch]
        self.n_up = n_up
        self._dense(rng, "fc", self.feature_width, self.stack[0] * self.base[0] * self.base[1])
        for i in range(n_up):
            cin, cout = self.stack[i], self.stack[i + 1]
            self._add(f"up{i}.w", glorot_uniform(rng, (cin, cout, 4, 4), cin * 16, cout * 16))
            self._add(f"up{i}.b", np.zeros(cout))

    def decode(self, f: Tensor) -> Tensor:
        if f.ndim != 2 or f.shape[1] != self.feature_width:
            raise T.ShapeError(f"decoder expects (B, {self.feature_width}) features, got {f.shape}")
        b = f.shape[0]
        h = T.reshape(self._apply("fc", f), (b, self.stack[0]) + self.base)
        for i in range(self.n_up):
            h = T.relu(h)
            h = T.conv_transpose2d(h, self.params[f"up{i}.w"], self.params[f"up{i}.b"], stride=2, padding=1)
        return T.tanh(h)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class AttentiveSTIC:
    """Encoder, feature classifier over C + 1 classes, and decoder.

    Exposes the classifier interface on images (``run``, ``forward_logits``,
    ``predict_proba``) so trainer and metric helpers accept it. It has no conv
    feature maps, so no Gram term ever applies.
    """

    conv_layers: list = []
    default_gram_layers: list = []

    def __init__(self, descriptor: dict, seed=0):
        if descriptor.get("kind") != "attentive":
            raise ValueError("descriptor kind must be 'attentive'")
        self.descriptor = attentive_descriptor(
            descriptor["input_shape"],
            descriptor["num_classes"],
            descriptor.get("feature_width", DEFAULT_FEATURE_WIDTH),
            descriptor.get("glimpses", DEFAULT_GLIMPSES),
            descriptor.get("read_size"),
            descriptor.get("read_width", 32),
            descriptor.get("hidden", (64,)),
            descriptor.get("decoder_channels", (16, 8)),
        )
        d = self.descriptor
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_shape = tuple(d["input_shape"])
        self.num_real_classes = d["num_classes"]
        self.feature_width = d["feature_width"]
        self.encoder = AttentiveEncoder(d, rng)
        cls_desc = {"kind": "mlp", "input_shape": [self.feature_width], "hidden": d["hidden"], "num_classes": d["num_classes"]}
        self.classifier = ClassifierModel(cls_desc, rng)
        self.decoder = Decoder(d, rng)
        self.penultimate_width = self.classifier.penultimate_width

    @property
    def num_outputs(self) -> int:
        return self.num_real_classes + 1

    @property
    def fake_class_index(self) -> int:
        return self.num_real_classes

    @property
    def params(self) -> dict:
        out = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"cls.{k}": v for k, v in self.classifier.params.items()})
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        return out

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.params
        if set(state) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {params[k].shape}")
            params[k].data = v.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _as_batch(self, x) -> tuple:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape == self.input_shape:
            return T.reshape(x, (1,) + self.input_shape), True
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"input shape {x.shape} does not match model input {self.input_shape}")
        return x, False

    def encode(self, x, steps: Optional[int] = None) -> Tensor:
        xb, single = self._as_batch(x)
        f = self.encoder.encode(xb, steps)
        return T.reshape(f, (self.feature_width,)) if single else f

    def decode(self, f) -> Tensor:
        f = f if isinstance(f, Tensor) else Tensor(f)
        single = f.ndim == 1
        out = self.decoder.decode(T.reshape(f, (1, f.shape[0])) if single else f)
        return T.reshape(out, self.input_shape) if single else out

    def run(self, x) -> Activations:
        xb, _ = self._as_batch(x)
        acts = self.classifier.run(self.encoder.encode(xb))
        return Activations([], acts.penultimate, acts.logits)

    def forward_logits(self, x) -> Tensor:
        xb, single = self._as_batch(x)
        logits = self.run(xb).logits
        return T.reshape(logits, (self.num_outputs,)) if single else logits

    __call__ = forward_logits

    def penultimate_features(self, x) -> Tensor:
        xb, single = self._as_batch(x)
        h = self.run(xb).penultimate
        return T.reshape(h, (h.shape[1],)) if single else h

    def _target_matrix(self, target, shape) -> np.ndarray:
        return self.classifier._target_matrix(target, shape)

    def log_cond(self, x, target) -> Tensor:
        logits = self.forward_logits(x)
        t = self._target_matrix(target, logits.shape)
        return T.sum(T.mul(Tensor(t), T.log_softmax(logits, -1)), -1)

    def predict_proba(self, x) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.forward_logits(x), -1).data

    def score(self, x) -> Tensor:
        raise TypeError("AttentiveSTIC has no score head")

    def sample_images(self, target, n: int, config: SamplerConfig, rng: np.random.Generator, f0=None) -> np.ndarray:
        if f0 is None:
            f0 = rng.uniform(-1.0, 1.0, size=(n, self.feature_width))
        f = feature_sample(self.classifier, target, config.eps1, config.eps3, config.steps, rng, f0)
        with T.no_grad():
            return self.decode(f).data


def feature_sample(
    classifier: ClassifierModel,
    target,
    eps_f: float,
    eps3: float,
    steps: int,
    rng: np.random.Generator,
    f0,
    clip_to=(-1.0, 1.0),
) -> np.ndarray:
    """Langevin ascent on log p(target | f) in feature space; no Gram term.

    Features are LSTM hidden states, so chains clip to (-1, 1) by default.
    """
    f0 = np.array(f0, dtype=np.float64)
    single = f0.ndim == 1
    f0 = f0[None] if single else f0
    if f0.shape[1:] != classifier.input_shape:
        raise T.ShapeError(f"features {f0.shape} do not match classifier input {classifier.input_shape}")
    config = SamplerConfig(eps1=eps_f, eps2=0.0, eps3=eps3, steps=steps, clip_to=clip_to)
    chain = Chain(f0, target, rng)
    for _ in range(steps):
        chain = grmala_step(chain, classifier, None, config)
        if chain.failed.any():
            raise ChainFailure(f"non-finite feature gradient at step {chain.t}")
    return chain.x[0] if single else chain.x


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class AttentiveConfig:
    warmup_iters: int = 200
    feature_width: int = DEFAULT_FEATURE_WIDTH
    glimpses: int = DEFAULT_GLIMPSES
    recon_weight: float = 1.0


def reconstruction_loss(model: AttentiveSTIC, x) -> Tensor:
    xt = x if isinstance(x, Tensor) else Tensor(x)
    rec = model.decoder.decode(model.encoder.encode(xt))
    return T.scalar_mul(T.sum(T.square(T.sub(rec, xt))), 1.0 / xt.shape[0])


def warmup_decoder(model: AttentiveSTIC, data: Dataset, iters: int, config: TrainConfig, rng) -> list:
    """Autoencoder training of encoder + decoder on real images; returns per-iteration losses."""
    params = list(model.encoder.params.values()) + list(model.decoder.params.values())
    opt = Adam(params, lr=config.lr)
    losses = []
    for _ in range(iters):
        idx = rng.integers(len(data), size=config.batch_size)
        loss = reconstruction_loss(model, real_inputs(data, idx, config.noise_std, rng))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def _feature_box_restart(prev: np.ndarray, n: int, width: int, p: float, rng) -> np.ndarray:
    base = prev[rng.integers(len(prev), size=n)] if len(prev) else np.zeros((n, width))
    fresh = rng.uniform(-1.0, 1.0, size=(n, width))
    return np.where(rng.uniform(size=(n, 1)) < p, fresh, base)


def train_attentive(
    config: TrainConfig,
    data: Dataset,
    rng: np.random.Generator,
    attn: AttentiveConfig = AttentiveConfig(),
    model: Optional[AttentiveSTIC] = None,
    checkpoint_dir=None,
    seed: int = 0,
) -> TrainResult:
    """Reconstruction warm-up, then STIC passes with negatives sampled in feature space."""
    if data.kind != "images":
        raise ValueError("the attentive variant needs image data")
    if model is None:
        desc = attentive_descriptor(data.shape, data.num_classes, attn.feature_width, attn.glimpses)
        model = AttentiveSTIC(desc, seed=rng.integers(2**63))
    warm = warmup_decoder(model, data, attn.warmup_iters, config, rng)
    C, F = data.num_classes, model.feature_width
    opt = Adam(model.parameters(), lr=config.lr)
    with T.no_grad():
        fakes = model.encode(np.ones((1,) + data.shape)).data  # blank image features at pass 1
    produced_by = 0
    metrics, snapshots, it = [], [], 0
    sconf = config.sampler
    for tau in range(1, config.passes + 1):
        if produced_by != tau - 1:
            raise RuntimeError(f"buffer made by pass {produced_by} consumed at pass {tau}")
        losses = []
        for _ in range(config.iterations_per_pass):
            opt.lr = step_decay_lr(it, config.lr, config.lr_decay, config.decay_interval)
            idx = rng.integers(len(data), size=config.batch_size)
            x = real_inputs(data, idx, config.noise_std, rng)
            y = data.labels[idx]
            f_real = model.encoder.encode(Tensor(x))
            loss = T.cross_entropy_soft(model.classifier.forward_logits(f_real), one_hot(y, C + 1))
            if config.n_mixup:
                mix = make_mixup(x, y, C, config.alpha, rng)
                f_mix = model.encoder.encode(Tensor(mix.images))
                loss = T.add(loss, T.cross_entropy_soft(model.classifier.forward_logits(f_mix), mix.labels))
            fk = fakes[rng.integers(len(fakes), size=config.fake_batch_size)]
            fake_t = one_hot(np.full(len(fk), C), C + 1)
            loss = T.add(loss, T.cross_entropy_soft(model.classifier.forward_logits(fk), fake_t))
            rec = model.decoder.decode(f_real)
            rec_loss = T.scalar_mul(T.sum(T.square(T.sub(rec, Tensor(x)))), attn.recon_weight / len(x))
            loss = T.add(loss, rec_loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            it += 1
        n_buf = config.n_buffer
        f0 = _feature_box_restart(fakes, n_buf, F, config.chain_restart_prob, rng)
        targets = np.arange(n_buf) % C
        new = np.empty_like(f0)
        try:
            for c in range(C):
                rows = targets == c
                new[rows] = feature_sample(model.classifier, c, sconf.eps1, sconf.eps3, sconf.steps, rng, f0[rows])
            fakes = new
        except ChainFailure as err:
            logger.warning("feature buffer refresh failed at pass %d: %s", tau, err)
        produced_by = tau
        with T.no_grad():
            fake_prob = float(model.classifier.predict_proba(fakes)[:, C].mean())
        row = {
            "pass": tau,
            "iter": it,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "train_acc": train_accuracy(model, data),
            "mean_fake_prob": fake_prob,
        }
        metrics.append(row)
        snapshots.append(model.state_dict())
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"pass{tau}.stic", model, tau, seed)
    return TrainResult(model, metrics, snapshots, {"warmup_losses": warm, "fake_features": fakes})
