"""
SoLA Desk - reversible lifelong model editing with frozen per-edit LoRA modules
Version: 1.0.0
"""

__version__ = "1.0.0"

# Export main classes for easy importing
from .adapters import LoraFactors, LoraModule, LoraPool
from .config import RunConfig
from .drift_baseline import ClusterRouter, drift_experiment
from .editor import EditRecord, EditTask, LifelongEditor, TrainRecipe, apply_edit
from .errors import SolaError
from .evalkit import Benchmark, BenchmarkConfig, MetricsReport, compute_metrics, gen_benchmark
from .model import BaseModel, ForwardTrace, ModelConfig, build_base, forward, train_base
from .numerics import SeededRng
from .routing import Decision, KeyMemory, SemanticRouter
from .utils import convert_numpy_types, load_json, save_json

__all__ = [
    'BaseModel',
    'Benchmark',
    'BenchmarkConfig',
    'ClusterRouter',
    'Decision',
    'EditRecord',
    'EditTask',
    'ForwardTrace',
    'KeyMemory',
    'LifelongEditor',
    'LoraFactors',
    'LoraModule',
    'LoraPool',
    'MetricsReport',
    'ModelConfig',
    'RunConfig',
    'SeededRng',
    'SemanticRouter',
    'SolaError',
    'TrainRecipe',
    'apply_edit',
    'build_base',
    'compute_metrics',
    'convert_numpy_types',
    'drift_experiment',
    'forward',
    'gen_benchmark',
    'load_json',
    'save_json',
    'train_base',
]
