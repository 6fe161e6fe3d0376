"""Run configuration: training hyperparameters plus dataset/output/eval options.

Serialized as flat JSON whose keys mirror the CLI flags (dashes become
underscores); flags override file values. Every run echoes its fully resolved
config next to its artifacts so it can be reproduced exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .training import TrainConfig

__all__ = ["RunConfig"]

_EVAL_FIELDS = ("lambda_quantile", "oscr_integration", "hscore_accepted_only")
_TUPLE_FIELDS = ("hidden_widths", "rebias_depths")


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "run"
    train: TrainConfig = field(default_factory=TrainConfig)
    lambda_quantile: float = 0.05
    oscr_integration: str = "trapezoid"
    hscore_accepted_only: bool = False

    def validate(self) -> None:
        self.train.validate()
        if not 0.0 <= self.lambda_quantile <= 1.0:
            raise ValueError(f"lambda_quantile must be in [0, 1], got {self.lambda_quantile}")
        if self.oscr_integration not in ("trapezoid", "step"):
            raise ValueError(f"unknown oscr_integration {self.oscr_integration!r}")

    def to_flat_dict(self) -> dict:
        doc = {"data_dir": self.data_dir, "out_dir": self.out_dir}
        for f in fields(TrainConfig):
            v = getattr(self.train, f.name)
            doc[f.name] = list(v) if isinstance(v, tuple) else v
        for name in _EVAL_FIELDS:
            doc[name] = getattr(self, name)
        return doc

    @classmethod
    def from_flat_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        train_names = {f.name for f in fields(TrainConfig)}
        train_kwargs = {}
        for name in list(doc):
            if name in train_names:
                v = doc.pop(name)
                train_kwargs[name] = tuple(v) if name in _TUPLE_FIELDS else v
        known = {"data_dir", "out_dir", *_EVAL_FIELDS}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(train=TrainConfig(**train_kwargs), **doc)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply non-None overrides; train-config keys are routed automatically."""
        train_names = {f.name for f in fields(TrainConfig)}
        train_kwargs = {}
        top_kwargs = {}
        for name, v in overrides.items():
            if v is None:
                continue
            if name in train_names:
                train_kwargs[name] = tuple(v) if name in _TUPLE_FIELDS else v
            else:
                top_kwargs[name] = v
        out = self
        if train_kwargs:
            out = replace(out, train=replace(out.train, **train_kwargs))
        if top_kwargs:
            out = replace(out, **top_kwargs)
        return out

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_flat_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_flat_dict(json.load(f))
