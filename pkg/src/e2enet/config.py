"""JSON run configuration with strict key checking.

A config document looks like::

    {
      "schema": 1,
      "arch":   {... ArchConfig fields except S ...},
      "train":  {... TrainConfig fields except delta_T / alpha ...},
      "dsff":   {"S": 0.8, "delta_T": 100, "alpha": 0.5},
      "data":   {... PhantomSpec fields ...},
      "report": {"pool": [...], "alpha1": 1.0, "alpha2": 0.5}
    }

Every section and key is optional except ``schema``; omitted values take the
dataclass defaults. Unknown keys are rejected with their dotted path.
"""
from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

from .data import PhantomSpec
from .model import ArchConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DsffConfig:
    S: float = 0.8
    delta_T: int = 100
    alpha: float = 0.5


@dataclass
class ReportConfig:
    pool: list = field(default_factory=list)
    alpha1: float = 1.0
    alpha2: float = 0.5


@dataclass
class CliConfig:
    arch: ArchConfig
    train: TrainConfig
    dsff: DsffConfig
    data: PhantomSpec
    report: ReportConfig

    def to_dict(self) -> dict:
        arch = self.arch.to_dict()
        arch.pop("S")
        train = self.train.to_dict()
        train.pop("delta_T")
        train.pop("alpha")
        return {
            "schema": SCHEMA_VERSION,
            "arch": arch,
            "train": train,
            "dsff": {"S": self.dsff.S, "delta_T": self.dsff.delta_T, "alpha": self.dsff.alpha},
            "data": self.data.to_dict(),
            "report": {"pool": self.report.pool, "alpha1": self.report.alpha1,
                       "alpha2": self.report.alpha2},
        }


_SECTIONS = {
    "arch": (ArchConfig, {"S"}),
    "train": (TrainConfig, {"delta_T", "alpha"}),
    "dsff": (DsffConfig, set()),
    "data": (PhantomSpec, set()),
    "report": (ReportConfig, set()),
}


def _check_value(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
    elif isinstance(default, (tuple, list)):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")


def _section(name: str, raw) -> dict:
    cls, hidden = _SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    defaults = {}
    for f in fields(cls):
        if f.name not in hidden:
            defaults[f.name] = f.default if f.default is not MISSING else f.default_factory()
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"{name}.{key}", "unknown key")
        _check_value(f"{name}.{key}", defaults[key], value)
    return dict(raw)


def parse_config(doc) -> CliConfig:
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be a JSON object")
    if "schema" not in doc:
        raise ConfigError("schema", "missing required schema version")
    if doc["schema"] != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported version {doc['schema']!r}, expected {SCHEMA_VERSION}")
    for key in doc:
        if key != "schema" and key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
    sec = {name: _section(name, doc.get(name, {})) for name in _SECTIONS}
    try:
        dsff = DsffConfig(**sec["dsff"])
    except (TypeError, ValueError) as e:
        raise ConfigError("dsff", str(e)) from None
    out = {}
    for name, build in (
        ("arch", lambda d: ArchConfig(S=dsff.S, **d)),
        ("train", lambda d: TrainConfig(delta_T=dsff.delta_T, alpha=dsff.alpha, **d)),
        ("data", lambda d: PhantomSpec(**d)),
        ("report", lambda d: ReportConfig(**d)),
    ):
        try:
            out[name] = build(sec[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(name, str(e)) from None
    return CliConfig(out["arch"], out["train"], dsff, out["data"], out["report"])


def load_config(path) -> CliConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("$", f"invalid JSON: {e}") from None
    return parse_config(doc)


def default_config() -> CliConfig:
    return parse_config({"schema": SCHEMA_VERSION})
