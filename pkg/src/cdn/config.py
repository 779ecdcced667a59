"""Experiment configuration: a YAML tree validated against a fixed schema.

Unknown keys are rejected and every validation message names the offending
field with its dotted path (``train.lr``, ``model.layer_sizes`` ...).
"""

from __future__ import annotations

import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .model import Architecture
from .training import TrainConfig

MODEL_KINDS = ("ml-cdn", "vb-cdn", "mcd", "ensemble", "vmg")
DATA_KINDS = ("toy", "idx")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class ModelSection:
    kind: str = "ml-cdn"
    layer_sizes: list = field(default_factory=lambda: [784, 100, 10])
    task: str = "classification"
    hyper_hidden: list = field(default_factory=lambda: [50])
    hyper_activation: str = "relu"
    activation: str = "relu"
    noise_std: Optional[float] = None
    sampling: str = "local"
    factor_bias: float = 0.0
    posterior_init: float = 1e-3
    dropout: float = 0.5
    members: int = 5

    def architecture(self) -> Architecture:
        return Architecture(
            layer_sizes=list(self.layer_sizes),
            task=self.task,
            hyper_hidden=list(self.hyper_hidden),
            hyper_activation=self.hyper_activation,
            activation=self.activation,
            noise_std=self.noise_std,
        )


@dataclass
class DataSection:
    kind: str = "toy"
    variant: str = "homoscedastic"
    n: Optional[int] = None
    toy_seed: int = 1
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    ood_images: Optional[str] = None
    ood_labels: Optional[str] = None
    validation_fraction: float = 0.1


@dataclass
class EvalSection:
    eps_grid: list = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(11)])
    samples: int = 100
    attack_size: int = 1000
    attack_passes: int = 1
    ood_score: str = "confidence"
    select_lambda: bool = False
    grid_points: int = 1000


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out: str = "results"
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"model": ModelSection, "train": TrainConfig, "data": DataSection, "eval": EvalSection}


def _coerce(path: str, value, hint):
    """Type-check ``value`` against a field's type hint (``Optional`` allowed)."""
    args = typing.get_args(hint)
    if typing.get_origin(hint) is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if hint is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def _section(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(raw) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")
    kwargs = {key: _coerce(f"{path}.{key}", value, hints[key]) for key, value in raw.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def _check_range(path: str, ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def validate(cfg: ExperimentConfig) -> None:
    m, d, e, t = cfg.model, cfg.data, cfg.eval, cfg.train
    _check_range("model.kind", m.kind in MODEL_KINDS, f"must be one of {MODEL_KINDS}")
    _check_range("model.sampling", m.sampling in ("local", "weights"), "must be 'local' or 'weights'")
    _check_range("model.posterior_init", m.posterior_init > 0, "must be > 0")
    _check_range("model.dropout", 0.0 <= m.dropout < 1.0, "must lie in [0, 1)")
    _check_range("model.members", m.members >= 2, "must be >= 2")
    try:
        m.architecture()
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from exc
    cdn = m.kind in ("ml-cdn", "vb-cdn")
    if cdn:
        want = "vb" if m.kind == "vb-cdn" else "ml"
        _check_range("train.objective", t.objective == want, f"model kind {m.kind} needs objective {want!r}")
    else:
        _check_range("train.objective", t.objective in ("nll", "vb") and (t.objective == "vb") == (m.kind == "vmg"),
                     f"model kind {m.kind} needs objective {'vb' if m.kind == 'vmg' else 'nll'!r}")
    _check_range("data.kind", d.kind in DATA_KINDS, f"must be one of {DATA_KINDS}")
    _check_range("data.variant", d.variant in ("homoscedastic", "heteroscedastic"), "must be homoscedastic or heteroscedastic")
    _check_range("data.n", d.n is None or d.n >= 1, "must be >= 1")
    _check_range("data.validation_fraction", 0.0 < d.validation_fraction < 1.0, "must lie in (0, 1)")
    for name in ("train_images", "train_labels", "test_images", "test_labels", "ood_images", "ood_labels"):
        p = getattr(d, name)
        _check_range(f"data.{name}", p is None or Path(p).exists(), f"file {p!r} does not exist")
    if d.kind == "idx":
        _check_range("data.train_images", d.train_images is not None and d.train_labels is not None,
                     "idx data needs train_images and train_labels")
    _check_range("eval.eps_grid", all(isinstance(v, (int, float)) and v >= 0 for v in e.eps_grid), "entries must be numbers >= 0")
    _check_range("eval.eps_grid", list(e.eps_grid) == sorted(e.eps_grid), "must be sorted")
    _check_range("eval.samples", e.samples >= 1, "must be >= 1")
    _check_range("eval.attack_size", e.attack_size >= 1, "must be >= 1")
    _check_range("eval.attack_passes", e.attack_passes >= 1, "must be >= 1")
    _check_range("eval.ood_score", e.ood_score in ("confidence", "entropy"), "must be 'confidence' or 'entropy'")
    _check_range("eval.grid_points", e.grid_points >= 2, "must be >= 2")
    _check_range("seed", 0 <= cfg.seed < 2**64, "must be an unsigned 64-bit integer")


def from_dict(raw) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping")
    allowed = set(SECTIONS) | {"out", "seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    sections = {name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    out = raw.get("out", "results")
    seed = raw.get("seed", 0)
    if not isinstance(out, str):
        raise ConfigError("out", f"expected a string, got {out!r}")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed", f"expected an integer, got {seed!r}")
    cfg = ExperimentConfig(out=out, seed=seed, **sections)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"invalid YAML: {exc}") from exc
    return from_dict(raw)
