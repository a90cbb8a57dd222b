"""Flat ``key = value`` run configuration.

Files are UTF-8, one assignment per line, ``#`` starts a comment. Unknown
keys are errors. Overrides use the same grammar and apply after the file,
last occurrence winning.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

from .samplers import SamplerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _int_list(s: str) -> tuple:
    s = s.strip()
    return tuple(int(p) for p in s.split(",") if p.strip()) if s else ()


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("none", "auto", "") else int(s)


def _opt_int_list(s: str) -> Optional[tuple]:
    return None if s.strip().lower() in ("none", "auto", "") else _int_list(s)


def _opt_float(s: str) -> Optional[float]:
    return None if s.strip().lower() in ("none", "auto", "") else float(s)


def _clip(s: str) -> Optional[tuple]:
    if s.strip().lower() == "none":
        return None
    lo, hi = (float(p) for p in s.split(","))
    return (lo, hi)


_TRAIN = TrainConfig()
_SAMPLER = SamplerConfig()

# key -> (parser, default)
KEYS: dict[str, tuple[Callable[[str], object], object]] = {
    # data
    "dataset": (str, "gaussians"),
    "classes": (int, 3),
    "n_per_class": (int, 100),
    "spread": (float, 0.2),
    "noise": (float, 0.1),
    "side": (int, 8),
    "idx_images": (str, ""),
    "idx_labels": (str, ""),
    "data_seed": (int, 0),
    # training
    "passes": (int, _TRAIN.passes),
    "iterations_per_pass": (int, _TRAIN.iterations_per_pass),
    "batch_size": (int, _TRAIN.batch_size),
    "fake_batch_size": (int, _TRAIN.fake_batch_size),
    "mixup_batch_size": (_opt_int, _TRAIN.mixup_batch_size),
    "lr": (float, _TRAIN.lr),
    "lr_decay": (float, _TRAIN.lr_decay),
    "decay_interval": (int, _TRAIN.decay_interval),
    "chain_restart_prob": (float, _TRAIN.chain_restart_prob),
    "noise_std": (float, _TRAIN.noise_std),
    "alpha": (float, _TRAIN.alpha),
    "buffer_size": (_opt_int, _TRAIN.buffer_size),
    "refresh_stride": (int, _TRAIN.refresh_stride),
    "arch": (str, _TRAIN.arch),
    "hidden": (_int_list, _TRAIN.hidden),
    "channels": (_int_list, _TRAIN.channels),
    # sampler
    "eps1": (float, _SAMPLER.eps1),
    "eps2": (float, _SAMPLER.eps2),
    "eps3": (float, _SAMPLER.eps3),
    "steps": (int, _SAMPLER.steps),
    "layers": (_opt_int_list, _SAMPLER.layers),
    "clip": (_clip, _SAMPLER.clip_to),
    "init": (str, _SAMPLER.init),
    # sample / interpolate / eval chains; none -> the training values
    "synth_eps1": (_opt_float, None),
    "synth_steps": (_opt_int, None),
    # score regularizer
    "score_weight": (float, 0.1),
    "trace_mode": (str, "auto"),
    "probe_count": (int, 1),
    # attentive variant
    "warmup_iters": (int, 200),
    "feature_width": (int, 100),
    "glimpses": (int, 4),
    # evaluation
    "eval_epochs": (int, 20),
    "knn_k": (int, 3),
    "samples_per_class": (int, 16),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def train_config(self) -> TrainConfig:
        v = self.values
        names = {f.name for f in fields(TrainConfig)} - {"sampler"}
        return TrainConfig(sampler=self.sampler_config(), **{k: v[k] for k in names})

    def sampler_config(self) -> SamplerConfig:
        v = self.values
        layers = list(v["layers"]) if v["layers"] is not None else None
        return SamplerConfig(v["eps1"], v["eps2"], v["eps3"], v["steps"], layers, v["clip"], v["init"])

    def synth_config(self) -> SamplerConfig:
        base = self.sampler_config()
        v = self.values
        eps1 = base.eps1 if v["synth_eps1"] is None else v["synth_eps1"]
        steps = base.steps if v["synth_steps"] is None else v["synth_steps"]
        return SamplerConfig(eps1, base.eps2, base.eps3, steps, base.layers, base.clip_to, base.init)

    def dump(self) -> str:
        """Resolved config in file grammar, keys sorted."""
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_assignment(line: str, where: str = "") -> tuple:
    if "=" not in line:
        raise ConfigError(f"{where}expected 'key = value', got {line!r}")
    key, value = (p.strip() for p in line.split("=", 1))
    if key not in KEYS:
        raise ConfigError(f"{where}unknown key {key!r}")
    parser, _ = KEYS[key]
    try:
        return key, parser(value)
    except ValueError as err:
        raise ConfigError(f"{where}bad value for {key}: {value!r} ({err})") from None


def parse_config(text: str, source: str = "<string>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            k, v = parse_assignment(line, f"{source}:{n}: ")
            out[k] = v
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    values = {k: default for k, (_, default) in KEYS.items()}
    if path is not None:
        values.update(parse_config(Path(path).read_text(encoding="utf-8"), str(path)))
    for ov in overrides:
        k, v = parse_assignment(ov, "override: ")
        values[k] = v
    cfg = RunConfig(values)
    try:
        cfg.train_config()
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return cfg
