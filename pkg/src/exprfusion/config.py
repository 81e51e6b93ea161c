"""Plain-text run configuration.

One ``section.key = value`` pair per line, ``#`` starts a comment. Every key
has a default; unknown keys are rejected. Tuples are comma-separated and
``none`` stands for an unset optional value.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train_manifest: str = ""
    val_manifest: str = ""


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


# section name -> (path of attribute names from RunConfig)
SECTIONS = {
    "backbone": ("model", "backbone"),
    "attention": ("model", "attention"),
    "encoder": ("model", "encoder"),
    "head": ("model", "head"),
    "loss": ("train", "loss"),
    "adam": ("train", "adam"),
    "lr_finder": ("train", "lr_finder"),
    "train": ("train",),
    "data": ("data",),
    "output": ("output",),
}
_PATH_KEYS = {"data.train_manifest", "data.val_manifest", "output.dir"}


def _section(cfg: RunConfig, path: tuple[str, ...]):
    obj = cfg
    for name in path:
        obj = getattr(obj, name)
    return obj


def _scalar_fields(obj) -> list[tuple[str, typing.Any]]:
    hints = typing.get_type_hints(type(obj))
    return [(f.name, hints[f.name]) for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(hints[f.name])]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, hint):
    text = text.strip()
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
            if text.lower() == "none":
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse(key, text, inner)
        if origin is tuple:
            return tuple(_parse(key, part, args[0]) for part in text.split(",") if part.strip())
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except (ValueError, IndexError):
        raise ConfigError(f"invalid value {text!r} for config key {key}") from None


def to_flat(cfg: RunConfig) -> dict[str, str]:
    flat = {}
    for section, path in SECTIONS.items():
        obj = _section(cfg, path)
        for name, _ in _scalar_fields(obj):
            flat[f"{section}.{name}"] = _format(getattr(obj, name))
    return flat


def from_flat(values: dict[str, str]) -> RunConfig:
    """Build a config from string values layered over the defaults."""
    defaults = RunConfig()
    known = to_flat(defaults)
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    merged = {**known, **values}

    def make(section: str, cls, **nested):
        hints = typing.get_type_hints(cls)
        kwargs = {
            f.name: _parse(f"{section}.{f.name}", merged[f"{section}.{f.name}"], hints[f.name])
            for f in dataclasses.fields(cls) if not dataclasses.is_dataclass(hints[f.name])
        }
        try:
            return cls(**kwargs, **nested)
        except TypeError as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    from .attention import AttentionConfig
    from .encoder import EncoderConfig
    from .model import BackboneSpec, FusionHeadConfig
    from .training import AdamConfig, FocalLossConfig, LrFinderConfig

    model = ModelConfig(
        backbone=make("backbone", BackboneSpec),
        attention=make("attention", AttentionConfig),
        encoder=make("encoder", EncoderConfig),
        head=make("head", FusionHeadConfig),
    )
    train = make(
        "train", TrainConfig,
        loss=make("loss", FocalLossConfig),
        adam=make("adam", AdamConfig),
        lr_finder=make("lr_finder", LrFinderConfig),
    )
    return RunConfig(model, train, make("data", DataConfig), make("output", OutputConfig))


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional), apply overrides, resolve paths to absolute."""
    values = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
        values = parse_lines(text.splitlines(), str(path))
        for key in _PATH_KEYS & values.keys():
            if values[key]:
                values[key] = str((path.parent / values[key]).resolve())
    for key, value in (overrides or {}).items():
        if key in _PATH_KEYS and value:
            value = str((base / value).resolve())
        values[key] = value
    cfg = from_flat(values)
    if not Path(cfg.output.dir).is_absolute():
        cfg.output.dir = str((base / cfg.output.dir).resolve())
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = ["# resolved exprfusion run configuration"]
    current = None
    for key, value in to_flat(cfg).items():
        section = key.split(".", 1)[0]
        if section != current:
            lines.append("")
            current = section
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
