from pathlib import Path

import numpy as np
import pytest

from evaluator import SyntheticBenchmark, synth_latency_table
from search import exhaustive_search
from search_space import ConvChoice, SpaceConfig, load_space_config
from supernet import SupernetStore, train_progressive

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def load_config(name: str) -> SpaceConfig:
    return load_space_config(CONFIGS / f"{name}.json")


@pytest.fixture(scope="session")
def default_config() -> SpaceConfig:
    return load_config("default")


@pytest.fixture(scope="session")
def toy_config() -> SpaceConfig:
    return load_config("toy")


@pytest.fixture(scope="session")
def toy_m3_config() -> SpaceConfig:
    return load_config("toy_m3")


@pytest.fixture(scope="session")
def single_config() -> SpaceConfig:
    return load_config("single")


@pytest.fixture(scope="session")
def flat_config() -> SpaceConfig:
    """No downsampling at all: every layer is (1,1), so no stride slots exist."""
    return SpaceConfig(M=3, N=1, input_h=2, input_w=2, target_h=2, target_w=2, base_channels=8)


@pytest.fixture(scope="session")
def one_arch_config() -> SpaceConfig:
    return SpaceConfig(M=1, N=0, input_h=2, input_w=2, target_h=2, target_w=2, base_channels=8,
                       op_choices=(ConvChoice(3, 1),))


@pytest.fixture(scope="session")
def toy_bench(toy_config) -> SyntheticBenchmark:
    return SyntheticBenchmark(toy_config, seed=0, noise_sigma=0.0)


@pytest.fixture(scope="session")
def toy_store(toy_config, toy_bench) -> SupernetStore:
    """random_path store on the toy space, trained with noiseless signals."""
    store = SupernetStore(toy_config, 3, "random_path")
    return train_progressive("random_path", store, toy_bench, 300, np.random.default_rng(0))


@pytest.fixture(scope="session")
def toy_table(toy_config):
    return synth_latency_table(toy_config, seed=0)


@pytest.fixture(scope="session")
def toy_optimum(toy_config, toy_store, toy_table):
    return exhaustive_search(toy_config, toy_store, None, toy_table)
