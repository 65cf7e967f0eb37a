"""Experiment configuration: one JSON document with a section per stage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

from ..genmodel import Architecture, TrainConfig
from ..metrics import MetricConfig
from ..phantom import PhantomParams, SUBTYPES
from ..simulate import DEFAULT_AD_SEVERITIES
from ..volume import PathLike
from .split import SplitSpec

ANALYSES = ("reconstruction", "severity", "subtypes", "healthiness", "regional", "latent")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class SimulationConfig:
    severities: List[float] = field(default_factory=lambda: list(DEFAULT_AD_SEVERITIES))
    subtypes: List[str] = field(default_factory=lambda: [s for s in SUBTYPES if s != "AD"])
    smoothing_sigma_mm: float = 5.0
    subtype_severity: float = 0.3
    regional_severity: float = 0.3
    regional_test: str = "mann_whitney"

    def __post_init__(self):
        if not self.severities:
            raise ConfigError("simulation.severities must be non-empty")
        if any(not 0 < f <= 1 for f in self.severities + [self.subtype_severity, self.regional_severity]):
            raise ConfigError("severities must lie in (0, 1]")
        bad = set(self.subtypes) - set(SUBTYPES)
        if bad:
            raise ConfigError(f"unknown subtypes: {sorted(bad)}")
        if self.regional_test not in ("mann_whitney", "welch_t"):
            raise ConfigError(f"unknown regional test {self.regional_test!r}")


@dataclass
class LatentConfig:
    minkowski_p: float = 10.0
    n_neighbors: int = 5
    ranks: List[int] = field(default_factory=lambda: list(range(1, 47, 5)))
    pca_components: int = 2
    sweep_subjects: int = 5
    sweep_severities: List[float] = field(default_factory=lambda: list(DEFAULT_AD_SEVERITIES))

    def __post_init__(self):
        if self.minkowski_p < 1:
            raise ConfigError("latent.minkowski_p must be >= 1")
        if not self.ranks or min(self.ranks) < 1:
            raise ConfigError("latent.ranks must be positive integers")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "results"
    cohort_path: Optional[str] = None
    atlas_path: Optional[str] = None
    phantom: PhantomParams = field(default_factory=PhantomParams)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: str = "vae"
    architecture: Optional[dict] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    train_folds: Optional[List[int]] = None
    fold: Optional[int] = None
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    qc_threshold: float = 0.1
    qc_margin_mm: float = 8.0
    latent: LatentConfig = field(default_factory=LatentConfig)
    analyses: List[str] = field(default_factory=lambda: list(ANALYSES))

    def __post_init__(self):
        if self.model not in ("vae", "identity"):
            raise ConfigError(f"model must be 'vae' or 'identity', got {self.model!r}")
        bad = set(self.analyses) - set(ANALYSES)
        if bad:
            raise ConfigError(f"unknown analyses: {sorted(bad)}")
        if self.train_folds is not None and any(not 0 <= k < self.split.n_folds for k in self.train_folds):
            raise ConfigError("train_folds must index existing folds")
        if self.fold is not None and not 0 <= self.fold < self.split.n_folds:
            raise ConfigError("fold override out of range")
        if not 0 < self.qc_threshold <= 1:
            raise ConfigError("qc_threshold must lie in (0, 1]")

    def folds_to_train(self) -> List[int]:
        if self.fold is not None and self.train_folds is None:
            return [self.fold]
        return list(range(self.split.n_folds)) if self.train_folds is None else sorted(set(self.train_folds))

    def arch(self) -> Architecture:
        base = {"input_dims": list(self.phantom.dims), "spacing_mm": list(self.phantom.spacing_mm)}
        base.update(self.architecture or {})
        return Architecture.from_dict(base)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Route one seed to every random stream: phantoms, split and training."""
        return replace(
            self,
            seed=seed,
            phantom=replace(self.phantom, global_seed=seed),
            split=replace(self.split, rng_seed=seed),
            train=replace(self.train, rng_seed=seed),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phantom"] = self.phantom.to_dict()
        return d


_SECTIONS = {
    "phantom": PhantomParams,
    "split": SplitSpec,
    "train": TrainConfig,
    "simulation": SimulationConfig,
    "metrics": MetricConfig,
    "latent": LatentConfig,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SEED_KEYS = {"phantom": "global_seed", "split": "rng_seed", "train": "rng_seed"}


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config; a top-level ``seed`` feeds every stream whose section
    does not pin its own seed."""
    d = dict(d)
    pinned = {k for k, key in _SEED_KEYS.items() if isinstance(d.get(k), dict) and key in d[k]}
    for key, cls in _SECTIONS.items():
        if key in d:
            d[key] = _build(cls, d[key], key)
    cfg = _build(ExperimentConfig, d, "config")
    seed = cfg.seed
    return replace(
        cfg,
        phantom=cfg.phantom if "phantom" in pinned else replace(cfg.phantom, global_seed=seed),
        split=cfg.split if "split" in pinned else replace(cfg.split, rng_seed=seed),
        train=cfg.train if "train" in pinned else replace(cfg.train, rng_seed=seed),
    )


def load_config(path: PathLike) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: PathLike, include_out_dir: bool = False) -> Path:
    """Write ``cfg`` as JSON; the output location is left out unless asked for,
    so identical runs in different folders save identical files."""
    path = Path(path)
    d = cfg.to_dict()
    if not include_out_dir:
        d.pop("out_dir")
    path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    return path
