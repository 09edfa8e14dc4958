"""Experiment configuration: one JSON-serialisable record per CLI run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .pruning import PruneConfig
from .sampling import SamplingSpec
from .scoring import HybridConfig
from .train import TrainConfig

CONFIG_SCHEMA = "nexprune.experiment/v1"


@dataclass
class DataConfig:
    """Synthetic blob data used when no dataset directory is given."""

    n_train: int = 2000
    n_test: int = 1000
    classes: int = 6
    size: int = 12
    channels: int = 3
    noise: float = 0.8
    jitter: float = 2.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    arch: str = "resnet_small"
    dataset: str | None = None  # directory holding train/ and test/ datasets
    checkpoint: str | None = None
    out: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, lr=0.01))
    prune: PruneConfig = field(default_factory=PruneConfig)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    tau_grid: tuple = (1.5, 2.0, 3.0)
    alpha_grid: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    exponent_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    first_n: int = 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if k != "schema"}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        nested = {"data": DataConfig, "train": TrainConfig, "finetune": TrainConfig,
                  "prune": PruneConfig, "sampling": SamplingSpec, "hybrid": HybridConfig}
        kw = {}
        for k, v in d.items():
            if k in nested:
                kw[k] = _update(getattr(base, k), v)
            elif k.endswith("_grid"):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return replace(base, **kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _update(obj, values: dict):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys for {type(obj).__name__}: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return replace(obj, **values)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x
