"""Flat run configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Values are parsed by the type of the field's default, so every
config round-trips through :func:`dump_config` and :func:`load_config`.
Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

MODELS = ("opt", "model1", "model2")
LOSS_FLAGS = ("l2", "edge", "local_euclidean", "chamfer", "laplacian_smoothing")


@dataclass(frozen=True)
class RunConfig:
    # data
    seed: int = 0
    dataset_seed: int = 0
    dataset_path: str = ""
    label_scheme: str = "css"
    output_dir: str = "runs"
    # classifier
    classifier_lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 200
    dropout: float = 0.3
    augmentation: bool = True
    full_rotation: bool = False
    checkpoint: str = ""
    # spectral
    k: int = 40
    basis_cache: str = ""
    # attack objective
    model: str = "opt"
    c: float = 1.0
    l2: bool = False
    edge: bool = False
    local_euclidean: bool = True
    chamfer: bool = False
    laplacian_smoothing: bool = False
    smoothing_weight: float = 0.0
    center: bool = False
    target: int = -1
    # optimization attack
    attack_lr: float = 1e-2
    max_iterations: int = 2000
    search: bool = True
    k_values: str = ""
    c0: float = 1e-2
    c_growth: float = 2.0
    c_rounds: int = 12
    c_bisections: int = 8
    stop_window: int = 25
    stall_patience: int = 100
    split: str = "test"
    shapes: str = ""
    workers: int = 1
    # generator
    generator_lr: float = 1e-4
    generator_epochs: int = 100
    generator_batch: int = 8
    resume: str = ""
    # evaluation
    attack_dirs: str = ""
    spike_threshold: float = 10.0

    def __post_init__(self):
        validate(self)

    def reconstruction_terms(self) -> tuple[str, ...]:
        return tuple(name for name in LOSS_FLAGS[:4] if getattr(self, name))

    def with_updates(self, **updates) -> RunConfig:
        unknown = sorted(set(updates) - field_names())
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return replace(self, **updates)


def int_list(text: str) -> list[int]:
    """``"5,10,20"`` to ``[5, 10, 20]``; an empty string gives an empty list."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


def field_names() -> set[str]:
    return {f.name for f in fields(RunConfig)}


def validate(cfg: RunConfig) -> None:
    if cfg.model not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {cfg.model!r}")
    if cfg.k < 1:
        raise ConfigError(f"k must be positive, got {cfg.k}")
    if cfg.c < 0 or cfg.smoothing_weight < 0:
        raise ConfigError("c and smoothing_weight must be non-negative")
    if cfg.c0 <= 0 or cfg.c_growth <= 1:
        raise ConfigError("c0 must be positive and c_growth greater than 1")
    if not 0 <= cfg.dropout < 1:
        raise ConfigError(f"dropout must lie in [0, 1), got {cfg.dropout}")
    for name in ("batch_size", "generator_batch", "workers", "max_iterations", "stop_window"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    for name in ("epochs", "generator_epochs", "c_rounds", "c_bisections", "stall_patience"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg.split not in ("train", "val", "test"):
        raise ConfigError(f"split must be train, val or test, got {cfg.split!r}")
    if any(k < 1 for k in int_list(cfg.k_values)) or int_list(cfg.shapes) and min(int_list(cfg.shapes)) < 0:
        raise ConfigError("k_values must be positive and shapes non-negative")
    if cfg.label_scheme not in ("css", "faust"):
        raise ConfigError(f"label_scheme must be css or faust, got {cfg.label_scheme!r}")


def _parse_value(name: str, text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {text!r}") from None


def _types() -> dict:
    return {f.name: type(f.default) for f in fields(RunConfig)}


def parse_pairs(pairs) -> dict:
    """``["key=value", ...]`` to a typed dict; unknown keys raise ConfigError."""
    types = _types()
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = _parse_value(key, value, types[key])
    return out


def load_config(path, overrides=None) -> RunConfig:
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        pairs.append(line)
    values = parse_pairs(pairs)
    values.update(overrides or {})
    return RunConfig(**values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(cfg).items())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
