"""Layered configuration: defaults < JSON file < environment < command line.

Every hyperparameter has a dotted key ``section.field`` (``masking.alpha``,
``editor.v_steps``, ``run.horizons``).  Environment overrides use
``NEURONEDIT_<SECTION>__<FIELD>`` (``NEURONEDIT_MASKING__ALPHA=2``).  Values
arriving as strings are coerced to the type of the default; tuples are
comma-separated.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .attribution import AttributionConfig
from .editor import EditorConfig
from .errors import ConfigError
from .harness import RunConfig
from .masking import MaskingConfig

ENV_PREFIX = "NEURONEDIT_"


@dataclass
class WorldSettings:
    seed: int = 0
    n_subjects: int = 200
    n_relations: int = 10
    n_objects: int = 100
    n_facts: int = 1000
    n_domains: int = 2


@dataclass
class ModelSettings:
    d_model: int = 64
    d_ffn: int = 256
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 16
    activation: str = "gelu"
    seed: int = 0


@dataclass
class TrainSettings:
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    label_smoothing: float = 0.1
    act_l1: float = 0.0
    freeze: tuple[str, ...] = ("tok_emb", "pos_emb")


@dataclass
class StreamSettings:
    n_edits: int = 200
    seed: int = 0
    n_locality: int = 2


@dataclass
class AblateSettings:
    top_k: tuple[int, ...] = (10, 50)
    layers: tuple[int, ...] = (1, 2, 3)
    lam: float = 10.0
    horizon: int = 100


@dataclass
class Settings:
    world: WorldSettings = field(default_factory=WorldSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    stream: StreamSettings = field(default_factory=StreamSettings)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    editor: EditorConfig = field(default_factory=EditorConfig)
    run: RunConfig = field(default_factory=RunConfig)
    ablate: AblateSettings = field(default_factory=AblateSettings)

    def run_config(self) -> RunConfig:
        return dataclasses.replace(self.run, attribution=self.attribution, masking=self.masking, editor=self.editor)

    def to_record(self) -> dict:
        return {sec: {k: _plain(v) for k, v in section_fields(self, sec).items()} for sec in SECTIONS}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_record(), sort_keys=True).encode()).hexdigest()


SECTIONS = tuple(f.name for f in dataclasses.fields(Settings))
# derived at run time from the world rather than configured
_HIDDEN = {"editor": {"contexts"}, "run": {"attribution", "masking", "editor"}}


def section_fields(settings: "Settings", section: str) -> dict[str, Any]:
    obj = getattr(settings, section)
    hidden = _HIDDEN.get(section, set())
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name not in hidden}


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def keys() -> list[str]:
    s = Settings()
    return [f"{sec}.{k}" for sec in SECTIONS for k in section_fields(s, sec)]


def coerce(key: str, value: Any, default: Any) -> Any:
    """Convert ``value`` to the type of ``default``."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            items = [x for x in value.split(",") if x.strip()] if isinstance(value, str) else list(value)
            kind = type(default[0]) if default else str
            return tuple(coerce(key, x, kind()) for x in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(str(value).strip()) if isinstance(value, str) else int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"cannot read {value!r} as {type(default).__name__}", stage="config", key=key) from None
    raise ConfigError(f"unsupported config type {type(default).__name__}", stage="config", key=key)


def set_key(settings: Settings, key: str, value: Any) -> None:
    sec, _, name = key.partition(".")
    if sec not in SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}", stage="config", key=key)
    current = section_fields(settings, sec)
    if name not in current:
        raise ConfigError(f"unknown config key {key!r}", stage="config", key=key)
    setattr(getattr(settings, sec), name, coerce(key, value, current[name]))


def flatten(doc: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        full = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, full + "."))
        else:
            out[full] = v
    return out


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX) and "__" in name:
            sec, _, key = name[len(ENV_PREFIX):].partition("__")
            out[f"{sec.lower()}.{key.lower()}"] = value
    return out


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, eq, value = item.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"expected key=value, got {item!r}", stage="config")
        out[key.strip()] = value
    return out


def load_settings(path: str | Path | None = None, environ: Mapping[str, str] | None = None,
                  overrides: Mapping[str, Any] | None = None) -> Settings:
    """Materialize the effective configuration and validate it."""
    s = Settings()
    layers: list[dict[str, Any]] = []
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found", stage="config") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}", stage="config") from None
        if not isinstance(doc, Mapping):
            raise ConfigError("config file must hold a JSON object", stage="config")
        layers.append(flatten(doc))
    layers.append(env_overrides(os.environ if environ is None else environ))
    layers.append(dict(overrides or {}))
    for layer in layers:
        for k, v in layer.items():
            set_key(s, k, v)
    validate(s)
    return s


def validate(s: Settings) -> None:
    s.run_config().validate()
    if s.model.n_layers <= max(s.attribution.layers):
        raise ConfigError(f"attribution layer {max(s.attribution.layers)} outside the {s.model.n_layers}-layer "
                          "model", stage="config", key="attribution.layers")
    if min(s.attribution.layers) < 0:
        raise ConfigError("attribution layers must be non-negative", stage="config", key="attribution.layers")
    if s.train.epochs < 0 or not s.train.lr > 0:
        raise ConfigError("train.epochs must be >= 0 and train.lr > 0", stage="config", key="train.lr")
    if s.stream.n_edits < 0:
        raise ConfigError("stream.n_edits must be >= 0", stage="config", key="stream.n_edits")
