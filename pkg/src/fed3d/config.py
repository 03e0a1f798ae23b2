"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Unknown keys are an error. Every
key, its type and its default are the fields of :class:`ExperimentConfig`.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from fed3d.detector import ModelDims
from fed3d.federation import CORRECTIONS, MODES, TrainSettings


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # federation
    clients: int = 20
    client_fraction: float = 0.25
    rounds: int = 100
    local_epochs: int = 4
    batch_size: int = 8
    lr_prompt: float = 3.5e-4
    lr_head: float = 7.0e-4
    optimizer: str = "sgd"
    weight_decay: float = 0.01
    mode: str = "fed3d"
    correction: str = "local_global"
    # model
    n_layers: int = 2
    n_heads: int = 2
    prompt_len: int = 8
    d_model: int = 16
    d_head: int = 8
    n_tokens: int = 8
    n_points: int = 64
    n_classes: int = 10
    point_width: int = 32
    # data
    samples_per_class: int = 60
    noise: float = 0.3
    prototype_seed: int = 0
    class_fraction: float = 0.7
    sample_fraction: float = 0.7
    strict_disjoint: bool = False
    imbalance_ratio: float = 1.0
    minority_classes: int = 0
    # backbone pretraining
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.02
    pretrain_batch: int = 16
    pretrain_per_class: int = 60
    # run
    seed: int = 0
    workers: int = 1
    out: str = "runs/default"
    backbone: str = ""

    def dims(self) -> ModelDims:
        return ModelDims(self.n_layers, self.n_heads, self.prompt_len, self.d_model, self.d_head,
                         self.n_tokens, self.n_points, self.n_classes, self.point_width)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(self.local_epochs, self.batch_size, self.lr_prompt, self.lr_head,
                             self.optimizer, self.weight_decay, self.correction, self.seed)

    def backbone_path(self) -> Path:
        return Path(self.backbone) if self.backbone else Path(self.out) / "backbone.f3dp"

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode must be one of {MODES}")
        need(self.correction in CORRECTIONS, f"correction must be one of {CORRECTIONS}")
        need(self.optimizer in ("sgd", "adamw"), "optimizer must be sgd or adamw")
        need(self.clients >= 1, "clients must be >= 1")
        need(0 < self.client_fraction <= 1, "client_fraction must lie in (0, 1]")
        need(self.rounds >= 1, "rounds must be >= 1")
        need(self.local_epochs >= 0, "local_epochs must be >= 0")
        need(self.batch_size >= 1 and self.pretrain_batch >= 1, "batch sizes must be >= 1")
        need(self.lr_prompt >= 0 and self.lr_head >= 0 and self.pretrain_lr >= 0, "learning rates must be >= 0")
        need(0 < self.class_fraction <= 1 and 0 < self.sample_fraction <= 1, "fractions must lie in (0, 1]")
        need(self.imbalance_ratio >= 1, "imbalance_ratio must be >= 1")
        need(0 <= self.minority_classes < self.n_classes, "minority_classes must lie in [0, n_classes)")
        need(self.samples_per_class >= 2 and self.pretrain_per_class >= 2, "need >= 2 samples per class")
        need(self.noise >= 0, "noise must be >= 0")
        need(self.workers >= 1, "workers must be >= 1")
        need(self.seed >= 0, "seed must be non-negative")
        try:
            self.dims().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of every field that can change results (``out`` and ``workers`` cannot)."""
        skip = {"out", "workers", "backbone"}
        text = "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items() if k not in skip)
        return hashlib.sha256(text.encode()).hexdigest()

    def data_digest(self) -> str:
        keys = ("clients", "n_classes", "n_points", "samples_per_class", "noise", "prototype_seed",
                "class_fraction", "sample_fraction", "strict_disjoint", "imbalance_ratio", "minority_classes",
                "seed")
        d = asdict(self)
        return hashlib.sha256("".join(f"{k}={_fmt(d[k])}\n" for k in keys).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file, then ``overrides`` (already typed or raw strings)."""
    values = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        values[k] = _coerce(k, v) if isinstance(v, str) else v
    return replace(ExperimentConfig(), **values).validate()
