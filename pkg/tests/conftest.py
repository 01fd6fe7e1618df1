import numpy as np
import pytest

from piano_mlr.data.datasets import synth_generate
from piano_mlr.data.models import Dataset, SyntheticSpec, WeightMatrix


def _make_data(n: int, d: int, m: int, seed: int = 0, labels: str = "model", bias: bool = False) -> Dataset:
    data, _ = synth_generate(SyntheticSpec(n=n, d=d, m=m, label_mode=labels, seed=seed, append_bias=bias))
    return data


@pytest.fixture
def make_data():
    return _make_data


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_data() -> Dataset:
    return _make_data(30, 4, 3, seed=1)


@pytest.fixture
def random_weights():
    def _random_weights(data: Dataset, seed: int, scale: float = 0.5) -> WeightMatrix:
        return WeightMatrix(scale * np.random.default_rng(seed).standard_normal((data.m, data.d)))

    return _random_weights
