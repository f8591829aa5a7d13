"""Run configuration: nested sections loaded from YAML/JSON, strict keys.

Sections and their keys mirror the dataclasses they build:

    model:      ModelConfig (input_channels/timepoints/num_classes are
                derived from the dataset at train time)
    loss:       LossConfig
    train:      TrainConfig
    experiment: test_regions, sweep, c_values, climate_modes, climate_input,
                include_baseline, trials, base_seed, metric,
                validation_fraction
    synthetic:  SyntheticSpec
    data:       path of the dataset cache (or CSV for ingest)
    output:     output directory
"""
from __future__ import annotations

import json
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .loss import LossConfig
from .model import ModelConfig
from .training import ExperimentConfig, TrainConfig

EXPERIMENT_KEYS = ("test_regions", "sweep", "c_values", "climate_modes", "climate_input",
                   "include_baseline", "trials", "base_seed", "metric", "validation_fraction")
TUPLE_KEYS = ("test_regions", "c_values", "climate_modes")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: dict = field(default_factory=dict)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: str | None = None
    output: str | None = None

    def experiment_config(self) -> ExperimentConfig:
        kw = {k: tuple(v) if k in TUPLE_KEYS else v for k, v in self.experiment.items()}
        try:
            return ExperimentConfig(model=self.model, loss=self.loss, train=self.train, **kw)
        except TypeError as exc:
            raise ConfigError(f"experiment: {exc}") from None

    def to_dict(self) -> dict:
        exp = asdict(self.experiment_config())
        for k in ("model", "loss", "train"):
            exp.pop(k)
        return {
            "model": asdict(self.model),
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "experiment": {k: list(v) if isinstance(v, tuple) else v for k, v in exp.items()},
            "synthetic": asdict(self.synthetic),
            "data": self.data,
            "output": self.output,
        }


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section [{section}] must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    allowed = {"model", "loss", "train", "experiment", "synthetic", "data", "output"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    exp = raw.get("experiment") or {}
    if not isinstance(exp, dict):
        raise ConfigError("section [experiment] must be a mapping")
    bad = sorted(set(exp) - set(EXPERIMENT_KEYS))
    if bad:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(bad)}")
    cfg = RunConfig(
        model=_build(ModelConfig, "model", raw.get("model") or {}),
        loss=_build(LossConfig, "loss", raw.get("loss") or {}),
        train=_build(TrainConfig, "train", raw.get("train") or {}),
        experiment=dict(exp),
        synthetic=_build(SyntheticSpec, "synthetic", raw.get("synthetic") or {}),
        data=raw.get("data"),
        output=raw.get("output"),
    )
    cfg.experiment_config()  # validate eagerly
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    return from_dict(raw)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Return a copy with the given keys of one section replaced."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "experiment":
        exp = {**cfg.experiment, **values}
        new = replace(cfg, experiment=exp)
        new.experiment_config()
        return new
    current = getattr(cfg, section)
    try:
        return replace(cfg, **{section: replace(current, **values)})
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def versions() -> dict:
    import numpy
    import torch

    from . import __version__

    return {
        "arcdog": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "torch": torch.__version__,
    }


def write_echo(cfg: RunConfig, out_dir: str | Path, extra: dict | None = None) -> Path:
    """Write the fully-resolved config (plus versions) into ``out_dir``."""
    path = Path(out_dir) / "config.json"
    doc = {"config": cfg.to_dict(), "versions": versions(), **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
