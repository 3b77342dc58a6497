"""Flat, JSON-compatible run configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .experiments import canonical_toy
from .flow import ModelConfig, validate_config
from .likelihood import Estimator


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str = "TwoMoons"
    # model
    dim: int = 2
    n_blocks: int = 10
    depth: int = 3
    growth: int = 32
    activation: str = "clipswish"
    concat: str = "learnable"
    coeff: float = 0.98
    kind: str = "dense"
    residual_widths: list | None = None
    identity_init: bool = False
    # optimisation
    lr: float = 1e-3
    iterations: int = 50_000
    batch: int = 500
    lc_start_iter: int = 0
    # log-determinant estimator used for the training loss
    estimator: str = "exact"
    n_terms: int = 20
    n_probes: int = 1
    geom_p: float = 0.5
    n_exact_terms: int = 20
    # bookkeeping
    seed: int = 0
    out: str = "runs/default"
    log_every: int = 100
    checkpoint_every: int = 5000
    test_size: int = 10_000

    def __post_init__(self):
        problems = []
        try:
            self.dataset = canonical_toy(self.dataset)
        except ValueError as err:
            problems.append(str(err))
        for name in ("iterations", "lc_start_iter", "seed"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("batch", "log_every", "checkpoint_every", "test_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be positive")
        if problems:
            raise ConfigError("invalid run config: " + "; ".join(problems))
        self.model_config()
        self.estimator_config()

    def model_config(self):
        try:
            cfg = ModelConfig(
                dim=self.dim,
                n_blocks=self.n_blocks,
                depth=self.depth,
                growth=self.growth,
                activation=self.activation,
                concat=self.concat,
                coeff=self.coeff,
                kind=self.kind,
                residual_widths=None if self.residual_widths is None else list(self.residual_widths),
                identity_init=self.identity_init,
            )
            validate_config(cfg)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None
        return cfg

    def estimator_config(self):
        try:
            return Estimator(self.estimator, self.n_terms, self.n_probes, self.geom_p, self.n_exact_terms)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def replace(self, **changes):
        return self.from_dict({**self.to_dict(), **changes})
