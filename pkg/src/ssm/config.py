"""Run configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cti import ALL_SLOTS, INTERACTION_CASES


@dataclass
class RunConfig:
    memory: int = 511  # L_m
    clusters: int = 4  # K
    d_model: int = 32
    d_edge: int = 16
    heads: int = 4
    n_layers: int = 2
    delta: float = 8.0
    lambda_a: float = 1.0
    lambda_st: float = 0.1
    horizon: int = 4
    lr: float = 3e-3
    warmup: int = 0
    schedule: str = "constant"  # or "cosine": decay to zero over the run
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    interaction: list[str] = field(default_factory=lambda: sorted(ALL_SLOTS))
    classifier: str = "shared"  # or "unshared"
    positional: bool = True
    readout: str = "mean"  # or "current"
    kl_detach: str | None = None  # None, "st" or "a"
    em_iters: int = 50
    em_tol: float = 1e-4
    eval_every: int = 250
    train_only: list[str] | None = None  # parameter name prefixes to update

    def __post_init__(self):
        if not self.memory >= self.clusters >= 1:
            raise ValueError(f"need memory >= clusters >= 1 (got {self.memory}, {self.clusters})")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.lambda_a < 0 or self.lambda_st < 0:
            raise ValueError("loss weights must be non-negative")
        if self.classifier not in ("shared", "unshared"):
            raise ValueError(f"unknown classifier mode {self.classifier!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.readout not in ("mean", "current"):
            raise ValueError(f"unknown readout {self.readout!r}")
        bad = set(self.interaction) - ALL_SLOTS
        if bad:
            raise ValueError(f"unknown interaction slots {sorted(bad)}")
        self.interaction = sorted(set(self.interaction))

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(self.interaction)

    def with_case(self, case: int) -> "RunConfig":
        return dataclasses.replace(self, interaction=sorted(INTERACTION_CASES[case]))

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
