"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import yaml

from .posterior import SamplerSettings
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "ChainSpec",
    "GroundTruthSpec",
    "ExperimentConfig",
    "PROPOSAL_KINDS",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
]

EXPERIMENTS = ("sas", "fa", "vs", "toy")
PROPOSAL_KINDS = ("exact", "affine", "flow", "conditional-flow", "independence", "standard-saturated")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Where the data come from. Unused keys are ignored by experiments that need no data."""

    source: str = "synthetic"  # or "file"
    path: str = ""
    seed: int = 0
    # factor analysis
    d: int = 4
    k_true: int = 2
    loadings: list = field(default_factory=lambda: [[1.0, 0.0], [0.8, 0.5], [0.6, -0.5], [0.7, 0.0]])
    variances: list = field(default_factory=lambda: [0.5, 0.5, 0.5, 0.5])
    n_obs: int = 200
    k_set: list = field(default_factory=lambda: [1, 2])
    # variable selection residual mixture
    mixture_weight: float = 0.9
    mixture_sd_large: float = 5.0


@dataclass(frozen=True)
class ChainSpec:
    n_chains: int = 10
    n_steps: int = 100_000
    within_per_across: int = 1
    jump: str = "uniform"  # or "marginals"
    refresh_aux: bool = True
    occupancy_every: int = 100
    n_batches: int = 20  # batch-means standard errors of pooled occupancy


@dataclass(frozen=True)
class GroundTruthSpec:
    """Reference probabilities: "auto" is analytic when known, else importance sampling.

    "chain" runs long independent TRJ chains with ``proposal`` fitted to a
    separate sample set, and reports pooled occupancy with batch-means SEs.
    """

    method: str = "auto"  # "auto", "importance" or "chain"
    budget: int = 200_000  # density evaluations for importance sampling
    proposal: str = "affine"
    chains: ChainSpec = field(default_factory=lambda: ChainSpec(n_chains=10, n_steps=400_000, within_per_across=2))


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "sas"
    proposals: list = field(default_factory=lambda: ["exact"])
    seed: int = 0
    n_train: int = 2000
    n_test: int = 2000
    replicates: int = 0
    chains: ChainSpec = field(default_factory=ChainSpec)
    run_chains: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    data: DataConfig = field(default_factory=DataConfig)
    rw_scale: float = 0.0  # 0 means tune from the training samples
    saturated_scale: float = 0.0  # reference sd of the standard saturated move; 0 uses the prior sd
    ground_truth: GroundTruthSpec = field(default_factory=GroundTruthSpec)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        bad = [p for p in self.proposals if p not in PROPOSAL_KINDS]
        if bad or not self.proposals:
            raise ConfigError(f"unknown proposal kinds {bad}; choose from {PROPOSAL_KINDS}")
        if self.n_train < 50 or self.n_test < 1 or self.replicates < 0:
            raise ConfigError("n_train must be >= 50, n_test >= 1 and replicates >= 0")
        for where, c in (("chains", self.chains), ("ground_truth.chains", self.ground_truth.chains)):
            if c.jump not in ("uniform", "marginals"):
                raise ConfigError(f"{where}.jump must be 'uniform' or 'marginals', got {c.jump!r}")
            if c.n_chains < 1 or c.n_steps < 1 or c.n_batches < 2 or c.occupancy_every < 1:
                raise ConfigError(f"{where}: n_chains, n_steps and occupancy_every must be positive, n_batches >= 2")
        gt = self.ground_truth
        if gt.method not in ("auto", "importance", "chain"):
            raise ConfigError(f"ground_truth.method must be 'auto', 'importance' or 'chain', got {gt.method!r}")
        if gt.proposal not in ("exact", "affine", "flow", "independence"):
            raise ConfigError(f"ground_truth.proposal must be a per-model proposal kind, got {gt.proposal!r}")
        if self.data.source not in ("synthetic", "file"):
            raise ConfigError(f"data.source must be 'synthetic' or 'file', got {self.data.source!r}")
        if self.data.source == "file" and not self.data.path:
            raise ConfigError("data.path is required when data.source is 'file'")


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kw = {}
    for key, value in raw.items():
        t = hints[key]
        if dataclasses.is_dataclass(t):
            kw[key] = _build(t, value, f"{where}.{key}")
        elif t is float and isinstance(value, int) and not isinstance(value, bool):
            kw[key] = float(value)
        elif t in (int, float, str, bool) and not isinstance(value, t):
            raise ConfigError(f"{where}.{key}: expected {t.__name__}, got {value!r}")
        else:
            kw[key] = value
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(raw):
    return _build(ExperimentConfig, raw or {}, "config")


def load_config(path):
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_hash(cfg):
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()

