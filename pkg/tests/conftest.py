"""
Shared fixtures: a tiny architecture, a briefly trained base model and a small benchmark.
"""

import numpy as np
import pytest

from src.editor import TrainRecipe
from src.evalkit import BenchmarkConfig, gen_benchmark, prepare_edit_stream
from src.model import ModelConfig, build_base, layer_name, train_base
from src.routing import DEFAULT_ALPHA


def make_config(**overrides) -> ModelConfig:
    values = dict(vocab=16, seq_len=6, d_model=8, n_blocks=2, ffn_hidden=12, n_classes=4,
                  edited_layers=[layer_name(1)], seed=3)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return make_config()


@pytest.fixture(scope="session")
def tiny_benchmark(tiny_config):
    return gen_benchmark(tiny_config, BenchmarkConfig(seed=5, n_edits=6, instances_per_edit=2,
                                                      holdout_size=40, n_train=256, n_test=64))


@pytest.fixture(scope="session")
def tiny_model(tiny_config, tiny_benchmark):
    return train_base(build_base(tiny_config), tiny_benchmark.base_train, epochs=3, lr=0.2, batch_size=32)


@pytest.fixture(scope="session")
def aligned_stream(tiny_model, tiny_benchmark):
    """Edits separated at the default alpha, with targets that differ from the base prediction."""
    return prepare_edit_stream(tiny_model, tiny_benchmark, DEFAULT_ALPHA)


@pytest.fixture
def fast_recipe() -> TrainRecipe:
    return TrainRecipe(lr0=0.1, epochs=8, rank=2)


@pytest.fixture
def token_rng():
    return np.random.default_rng(11)
