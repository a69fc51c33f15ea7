"""Experiment configuration: one YAML file, validated by pydantic, with dotted overrides."""

from __future__ import annotations

from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError
from .simulate import DATASET_PRESETS, KERNEL_IDS
from .trainer import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSpec(_Strict):
    kernel: str | None = "1d-nonstat"
    path: str | None = None
    mu: float | None = None
    T: float | None = None
    bounds: list[list[float]] | None = None
    n_sequences: int = Field(300, ge=0)
    lam_bar: float | None = None
    train_fraction: float = Field(0.9, gt=0, le=1)

    @field_validator("kernel")
    @classmethod
    def _known(cls, v):
        if v is not None and v not in KERNEL_IDS:
            raise ValueError(f"unknown kernel {v!r}; choose from {', '.join(KERNEL_IDS)}")
        return v


class ModelSpec(_Strict):
    L: int | None = Field(None, ge=1)
    R: int | None = Field(None, ge=1)
    Q: int = Field(0, ge=0)
    n_marks: int = Field(1, ge=1)
    tau_max: float | None = Field(None, gt=0)
    a_max: float | None = Field(None, gt=0)
    hidden: list[int] = [64, 64]
    temporal_param: str = "displacement"
    t_max: float | None = None
    mu_init: float | None = Field(None, ge=0)

    @field_validator("temporal_param")
    @classmethod
    def _param(cls, v):
        if v not in ("displacement", "absolute"):
            raise ValueError("temporal_param must be 'displacement' or 'absolute'")
        return v


class GridConfig(_Strict):
    n_t: int = Field(50, ge=2)
    n_s: int = Field(1500, ge=1)
    n_bar_t: int = Field(50, ge=1)
    n_bar_s: int = Field(15, ge=1)


class TrainSpec(_Strict):
    learning_rate: float | None = Field(None, gt=0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(50, ge=0)
    w0: float = Field(1.0, gt=0)
    a: float = Field(1.2, gt=1)
    eps_b: float = Field(1e-3, gt=0)
    max_backoff: int = Field(8, ge=0)
    checkpoint_every: int = Field(10, ge=0)


class EvalSpec(_Strict):
    mre_n_t: int = Field(200, ge=2)
    mre_n_s: int = Field(20, ge=1)
    predict: bool = True
    rank_n_grid: int = Field(300, ge=2)
    rank_tolerance: float = Field(1e-10, gt=0)
    rank_extent: float = Field(100.0, gt=0)
    heatmap_n: int = Field(100, ge=2)
    n_curves: int = Field(3, ge=0)


class ExperimentConfig(_Strict):
    seed: int = 0
    threads: int = Field(1, ge=1)
    out: str = "runs/default"
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    grids: GridConfig = GridConfig()
    train: TrainSpec = TrainSpec()
    eval: EvalSpec = EvalSpec()

    @model_validator(mode="after")
    def _source(self):
        if self.dataset.kernel is None and self.dataset.path is None:
            raise ValueError("dataset needs either a kernel id or a path")
        return self

    def resolved(self):
        """Copy with kernel presets filled in wherever a value was left unset."""
        cfg = self.model_copy(deep=True)
        preset = DATASET_PRESETS.get(cfg.dataset.kernel or "", {})
        ds, md = cfg.dataset, cfg.model
        for key, attr in (("mu", "mu"), ("T", "T"), ("bounds", "bounds")):
            if getattr(ds, attr) is None and key in preset:
                setattr(ds, attr, preset[key])
        for key in ("L", "R", "tau_max", "a_max"):
            if getattr(md, key) is None and preset.get(key) is not None:
                setattr(md, key, preset[key])
        if cfg.train.learning_rate is None:
            cfg.train.learning_rate = preset.get("learning_rate", 0.1)
        if md.L is None:
            md.L = 1
        if md.R is None:
            md.R = 1
        if md.temporal_param == "absolute" and md.t_max is None and ds.T is not None:
            md.t_max = ds.T
        return cfg

    def train_config(self):
        t, g = self.train, self.grids
        return TrainConfig(learning_rate=t.learning_rate or 0.1, batch_size=t.batch_size, epochs=t.epochs, w0=t.w0,
                           a=t.a, eps_b=t.eps_b, seed=self.seed, max_backoff=t.max_backoff,
                           n_t=g.n_t, n_s=g.n_s, n_bar_t=g.n_bar_t, n_bar_s=g.n_bar_s)


def _wrap(exc):
    return ConfigurationError(str(exc).replace("\n", "; "))


def load_config(path=None, overrides=None):
    """Read a YAML config (or defaults when ``path`` is None) and apply ``{dotted.key: value}`` overrides."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise _wrap(exc) from exc


def _set_dotted(data, key, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text):
    """``"train.epochs=5"`` -> ``("train.epochs", 5)``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def dump_config(cfg):
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
