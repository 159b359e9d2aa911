"""Run configuration: one JSON document plus dotted-path overrides.

Every section is a dataclass; unknown keys anywhere are rejected.  The
resolved document (defaults applied) is what gets embedded in outputs, so
feeding it back in reproduces a run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from dataclasses import field as dc_field
from pathlib import Path

from .data import ToySceneSpec
from .field import FieldConfig
from .train import TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass
class RenderConfig:
    background: list = dc_field(default_factory=lambda: [1.0, 1.0, 1.0])
    scales: list = dc_field(default_factory=lambda: [1])
    chunk_rays: int = 8192


@dataclass
class DataConfig:
    root: str | None = None         # Blender-convention directory; None -> toy scene
    toy: dict = dc_field(default_factory=lambda: ToySceneSpec().to_dict())
    train_factors: list = dc_field(default_factory=lambda: [1])
    eval_factors: list = dc_field(default_factory=lambda: [1])


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    data: DataConfig = dc_field(default_factory=DataConfig)
    out: str = "out"
    workers: int = 1

    def to_dict(self):
        return asdict(self)

    def embedded(self):
        """The document embedded in artifacts; output location and worker count
        do not affect results and are left out."""
        doc = self.to_dict()
        del doc["out"], doc["workers"]
        return doc

    def toy_spec(self):
        return ToySceneSpec.from_dict(self.data.toy)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(doc, cls, "")
        if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {doc['version']}")
        kw = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            value = doc[f.name]
            sub = _SECTIONS.get(f.name)
            if sub is not None:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {f.name!r} must be an object")
                _reject_unknown(value, sub, f.name + ".")
                try:
                    value = sub(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{f.name}: {exc}") from exc
            kw[f.name] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for key in ("train_factors", "eval_factors"):
            fs = getattr(self.data, key)
            if not fs or any(int(s) != s or s < 1 for s in fs):
                raise ConfigError(f"data.{key} must be positive integers")
        try:
            self.toy_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.toy: {exc}") from exc


_SECTIONS = {"field": FieldConfig, "train": TrainConfig,
             "render": RenderConfig, "data": DataConfig}


def _reject_unknown(doc, cls, prefix):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def parse_value(text):
    """JSON if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc, assignment):
    """Apply ``a.b.c=value`` to a nested dict in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(raw)


def resolve(path=None, overrides=(), seed=None, workers=None, out=None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``, then flag shortcuts."""
    doc = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        RunConfig.from_dict(user)  # unknown-key and type checks on the raw file
        _merge(doc, user)
    for assignment in overrides:
        apply_override(doc, assignment)
    if seed is not None:
        doc["train"]["seed"] = int(seed)
    if workers is not None:
        doc["workers"] = int(workers)
    if out is not None:
        doc["out"] = str(out)
    return RunConfig.from_dict(doc)


def _merge(base, user):
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
