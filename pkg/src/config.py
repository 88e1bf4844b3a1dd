"""
Run Configuration for SoLA Desk
One RunConfig nests the model, recipe and benchmark settings plus sweep grids.

Precedence: defaults < --config file < command-line flags < SOLA_OUT (output directory only).
"""

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .drift_baseline import DEFAULT_RADIUS_GRID
from .editor import TrainRecipe
from .errors import ConfigError
from .evalkit import ES_TARGET, BenchmarkConfig
from .model import ModelConfig, layer_name
from .routing import DEFAULT_ALPHA, DISTANCE_METRICS
from .utils import load_json, save_json

logger = logging.getLogger(__name__)

OUT_ENV_VAR = "SOLA_OUT"
DEFAULT_SEED = 7
DEFAULT_RANKS = (1, 2, 3, 4, 5, 10)
DEFAULT_LAYER_WINDOWS = ("0-1", "1-2", "2-3")


def parse_layer_window(window: str, n_blocks: int) -> List[str]:
    """``"1-2"`` -> FFN output projections of blocks 1 and 2."""
    try:
        start, end = (int(part) for part in window.split("-"))
    except ValueError as e:
        raise ConfigError(f"Layer window must look like '1-2', got '{window}'") from e
    if not 0 <= start <= end < n_blocks:
        raise ConfigError(f"Layer window '{window}' is outside blocks 0..{n_blocks - 1}")
    return [layer_name(i) for i in range(start, end + 1)]


@dataclass
class RunConfig:
    """
    Everything a run depends on.

    ``seed`` is the single source of randomness: it is copied into the model
    and benchmark configs.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    recipe: TrainRecipe = field(default_factory=TrainRecipe)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    alpha: float = DEFAULT_ALPHA
    metric: str = "cosine"
    base_epochs: int = 30
    base_lr: float = 0.1
    base_batch_size: int = 64
    progress_holdout: int = 50
    rollback_count: int = 10
    es_target: float = ES_TARGET
    drift_min_updates: int = 20
    radius_grid: List[float] = field(default_factory=lambda: list(DEFAULT_RADIUS_GRID))
    ranks: List[int] = field(default_factory=lambda: list(DEFAULT_RANKS))
    layer_windows: List[str] = field(default_factory=lambda: list(DEFAULT_LAYER_WINDOWS))
    seed: int = DEFAULT_SEED
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.metric not in DISTANCE_METRICS:
            raise ConfigError(f"Unknown distance metric '{self.metric}'. Allowed: {DISTANCE_METRICS}")
        if self.base_epochs < 0 or self.base_lr < 0 or self.base_batch_size < 1:
            raise ConfigError("Base training needs epochs >= 0, lr >= 0 and batch size >= 1")
        if self.progress_holdout < 0 or self.rollback_count < 0 or self.drift_min_updates < 0:
            raise ConfigError("progress_holdout, rollback_count and drift_min_updates must be >= 0")
        if not 0.0 <= self.es_target <= 1.0:
            raise ConfigError(f"es_target must lie in [0, 1], got {self.es_target}")
        if any(not r > 0 for r in self.radius_grid):
            raise ConfigError(f"Cluster radii must be positive, got {self.radius_grid}")
        if any(r < 1 for r in self.ranks):
            raise ConfigError(f"Ranks must be >= 1, got {self.ranks}")
        self.model.seed = self.seed
        self.benchmark.seed = self.seed

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None) -> "RunConfig":
        data = self.to_dict()
        if seed is not None:
            data["seed"] = int(seed)
        if out_dir is not None:
            data["out_dir"] = str(out_dir)
        return RunConfig.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["model"] = self.model.to_dict()
        data["recipe"] = self.recipe.to_dict()
        data["benchmark"] = self.benchmark.to_dict()
        data["radius_grid"] = list(self.radius_grid)
        data["ranks"] = list(self.ranks)
        data["layer_windows"] = list(self.layer_windows)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        values = dict(data)
        if "model" in values:
            values["model"] = ModelConfig.from_dict(values["model"])
        if "recipe" in values:
            values["recipe"] = TrainRecipe.from_dict(values["recipe"])
        if "benchmark" in values:
            values["benchmark"] = BenchmarkConfig.from_dict(values["benchmark"])
        return cls(**values)

    def save(self, path) -> Path:
        return save_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(load_json(path))


def resolve_config(config_path: Optional[str] = None, seed: Optional[int] = None,
                   out_dir: Optional[str] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Apply the precedence chain and return the resolved RunConfig."""
    environ = os.environ if environ is None else environ
    config = RunConfig.load(config_path) if config_path else RunConfig()
    env_out = environ.get(OUT_ENV_VAR)
    if env_out:
        out_dir = env_out
    config = config.with_overrides(seed=seed, out_dir=out_dir)
    logger.debug(f"Resolved config: seed {config.seed}, out {config.out_dir}")
    return config

