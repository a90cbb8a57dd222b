"""Small classifiers over C real classes plus one fake class."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ClassifierModel",
    "ScoreModel",
    "Activations",
    "mlp",
    "cnn",
    "build_model",
    "glorot_uniform",
]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class Activations:
    maps: list  # conv outputs, each (B, N_L, M_L, M_L)
    penultimate: Tensor  # (B, D)
    logits: Tensor  # (B, C + 1)


class ClassifierModel:
    """MLP or CNN emitting ``C + 1`` logits; index ``C`` is the fake class.

    The architecture lives in a JSON-friendly ``descriptor`` so checkpoints can
    rebuild the model. There is no normalization layer anywhere, so a sample's
    output never depends on the rest of its batch.
    """

    def __init__(self, descriptor: dict, seed: int | np.random.Generator = 0):
        self.descriptor = copy.deepcopy(descriptor)
        kind = descriptor["kind"]
        if kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.num_real_classes = int(descriptor["num_classes"])
        if self.num_real_classes < 1:
            raise ValueError("num_classes must be positive")
        self.input_shape = tuple(int(s) for s in descriptor["input_shape"])
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self._conv_specs: list[tuple[str, int]] = []  # (name, stride)
        self._dense: list[str] = []
        self._build(rng)

    # -- construction --------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(value, requires_grad=True)

    def _build(self, rng: np.random.Generator) -> None:
        d = self.descriptor
        width = int(np.prod(self.input_shape))
        if self.kind == "cnn":
            if len(self.input_shape) != 3:
                raise ValueError(f"cnn input_shape must be (C, H, W), got {self.input_shape}")
            c, h, _ = self.input_shape
            k = int(d.get("kernel", 3))
            strides = d.get("strides") or [1] + [2] * (len(d["channels"]) - 1)
            for i, (f, s) in enumerate(zip(d["channels"], strides)):
                name = f"conv{i}"
                self._add(f"{name}.w", glorot_uniform(rng, (f, c, k, k), c * k * k, f * k * k))
                self._add(f"{name}.b", np.zeros(f))
                self._conv_specs.append((name, int(s)))
                h = (h + 2 * (k // 2) - k) // int(s) + 1
                c = f
            width = c * h * h
        dims = [width] + [int(u) for u in d.get("hidden", [])] + [self.num_real_classes + 1]
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            name = f"fc{i}"
            self._add(f"{name}.w", glorot_uniform(rng, (fi, fo), fi, fo))
            self._add(f"{name}.b", np.zeros(fo))
            self._dense.append(name)
        self.penultimate_width = dims[-2]

    # -- properties ----------------------------------------------------
    @property
    def num_outputs(self) -> int:
        return self.num_real_classes + 1

    @property
    def fake_class_index(self) -> int:
        return self.num_real_classes

    @property
    def conv_layers(self) -> list[int]:
        return list(range(len(self._conv_specs)))

    @property
    def default_gram_layers(self) -> list[int]:
        return self.conv_layers[-2:]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.copy()

    def clone(self) -> "ClassifierModel":
        other = copy.copy(self)
        other.descriptor = copy.deepcopy(self.descriptor)
        other.params = {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}
        return other

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward -------------------------------------------------------
    def _as_batch(self, x) -> tuple[Tensor, bool]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape == self.input_shape:
            return T.reshape(x, (1,) + self.input_shape), True
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"input shape {x.shape} does not match model input {self.input_shape}")
        return x, False

    def run(self, x) -> Activations:
        x, _ = self._as_batch(x)
        maps = []
        h = x
        p = self.params
        for name, stride in self._conv_specs:
            k = p[f"{name}.w"].shape[2]
            h = T.relu(T.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=k // 2))
            maps.append(h)
        h = T.reshape(h, (h.shape[0], -1)) if h.ndim > 2 else h
        for name in self._dense[:-1]:
            h = T.relu(T.bias_add(T.matmul(h, p[f"{name}.w"]), p[f"{name}.b"]))
        last = self._dense[-1]
        logits = T.bias_add(T.matmul(h, p[f"{last}.w"]), p[f"{last}.b"])
        return Activations(maps, h, logits)

    def forward_logits(self, x) -> Tensor:
        xb, single = self._as_batch(x)
        logits = self.run(xb).logits
        return T.reshape(logits, (self.num_outputs,)) if single else logits

    __call__ = forward_logits

    def penultimate_features(self, x) -> Tensor:
        xb, single = self._as_batch(x)
        h = self.run(xb).penultimate
        return T.reshape(h, (h.shape[1],)) if single else h

    def feature_maps(self, x, layers: Optional[Sequence[int]] = None) -> list[Tensor]:
        """Per-layer activation matrices of shape (B, N_L, M_L * M_L)."""
        layers = self.default_gram_layers if layers is None else list(layers)
        for L in layers:
            if L not in self.conv_layers:
                raise ValueError(f"layer {L} is not a conv block (conv layers: {self.conv_layers})")
        xb, _ = self._as_batch(x)
        maps = self.run(xb).maps
        out = []
        for L in layers:
            m = maps[L]
            out.append(T.reshape(m, (m.shape[0], m.shape[1], m.shape[2] * m.shape[3])))
        return out

    def log_cond(self, x, target) -> Tensor:
        """sum_c t_c log softmax(logits)_c per sample.

        ``target`` is a class index, a distribution over C + 1 classes, or a
        batch of distributions.
        """
        logits = self.forward_logits(x)
        t = self._target_matrix(target, logits.shape)
        return T.sum(T.mul(T.Tensor(t), T.log_softmax(logits, -1)), -1)

    def _target_matrix(self, target, shape) -> np.ndarray:
        if isinstance(target, (int, np.integer)):
            if not 0 <= target < self.num_outputs:
                raise ValueError(f"class {target} out of range [0, {self.num_outputs})")
            t = np.zeros(self.num_outputs)
            t[target] = 1.0
        else:
            t = np.asarray(target, dtype=np.float64)
        if t.shape[-1] != self.num_outputs:
            raise T.ShapeError(f"target shape {t.shape} vs logits {shape}")
        if np.any(t < 0) or np.any(np.abs(t.sum(-1) - 1.0) > 1e-9):
            raise ValueError("target must be a probability distribution (nonnegative, sums to 1)")
        return np.broadcast_to(t, shape).copy()

    def unnorm_log_joint(self, x, c: int) -> Tensor:
        if not 0 <= c < self.num_outputs:
            raise ValueError(f"class {c} out of range [0, {self.num_outputs})")
        logits = self.forward_logits(x)
        return logits[..., c]

    def unnorm_log_marginal(self, x) -> Tensor:
        return T.logsumexp(self.forward_logits(x), -1)

    def score(self, x) -> Tensor:
        raise TypeError(f"{type(self).__name__} has no score head; use ScoreModel")

    def predict_proba(self, x) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.forward_logits(x), -1).data


class ScoreModel(ClassifierModel):
    """Classifier with an extra head whose output has the input's shape."""

    def __init__(self, descriptor: dict, seed: int | np.random.Generator = 0):
        descriptor = dict(descriptor, score=True)
        super().__init__(descriptor, seed)

    def _build(self, rng: np.random.Generator) -> None:
        super()._build(rng)
        d_in = int(np.prod(self.input_shape))
        self._add("score.w", glorot_uniform(rng, (self.penultimate_width, d_in), self.penultimate_width, d_in))
        self._add("score.b", np.zeros(d_in))

    def run_with_score(self, x) -> tuple[Activations, Tensor]:
        xb, _ = self._as_batch(x)
        acts = self.run(xb)
        s = T.bias_add(T.matmul(acts.penultimate, self.params["score.w"]), self.params["score.b"])
        return acts, T.reshape(s, xb.shape)

    def score(self, x) -> Tensor:
        xb, single = self._as_batch(x)
        _, s = self.run_with_score(xb)
        return T.reshape(s, self.input_shape) if single else s


def mlp(input_dim: int, num_classes: int, hidden: Sequence[int] = (64, 64), seed=0, score: bool = False):
    desc = {"kind": "mlp", "input_shape": [int(input_dim)], "hidden": list(hidden), "num_classes": int(num_classes)}
    return ScoreModel(desc, seed) if score else ClassifierModel(desc, seed)


def cnn(
    input_shape: Sequence[int],
    num_classes: int,
    channels: Sequence[int] = (8, 16, 32),
    seed=0,
    score: bool = False,
):
    desc = {
        "kind": "cnn",
        "input_shape": list(input_shape),
        "channels": list(channels),
        "strides": [1] + [2] * (len(channels) - 1),
        "kernel": 3,
        "hidden": [],
        "num_classes": int(num_classes),
    }
    return ScoreModel(desc, seed) if score else ClassifierModel(desc, seed)


def build_model(descriptor: dict, seed=0) -> ClassifierModel:
    if descriptor.get("kind") == "attentive":
        from .attentive import AttentiveSTIC

        return AttentiveSTIC(descriptor, seed)
    cls = ScoreModel if descriptor.get("score") else ClassifierModel
    return cls(descriptor, seed)
