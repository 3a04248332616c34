from pathlib import Path
from typing import List

import numpy as np
import pytest

from src.services.data import DataSample, Dataset
from src.services.synthbench import PlantedInteraction, PlantedSpec, generate
from src.services.trainer import TrainConfig

REPO_ROOT = Path(__file__).resolve().parents[1]
SAMPLE_DIR = REPO_ROOT / "data" / "sample"


def random_samples(
    num_features: int, n: int, rng: np.random.Generator, min_m: int = 2, max_m: int = 6
) -> List[DataSample]:
    samples = []
    for i in range(n):
        m = int(rng.integers(min_m, max_m + 1))
        ids = rng.choice(num_features, size=m, replace=False)
        values = rng.uniform(-1.0, 1.0, size=m)
        samples.append(
            DataSample(
                tuple((int(f), float(v)) for f, v in zip(ids, values)),
                label=i % 2,
                user=i // 4,
                item=i,
            )
        )
    return samples


@pytest.fixture
def sample_dir() -> Path:
    return SAMPLE_DIR


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return TrainConfig(d=4, k=3, hidden=6, batch_size=16, epochs=2, lr=0.01, seed=0)


@pytest.fixture
def small_spec() -> PlantedSpec:
    return PlantedSpec(
        m=6,
        n_samples=160,
        interactions=[
            PlantedInteraction(members=(0, 1), coeff=3.0),
            PlantedInteraction(members=(2, 3, 4), coeff=-2.5),
        ],
    )


@pytest.fixture
def tiny_dataset(small_spec) -> Dataset:
    generated = generate(small_spec, small_spec.n_samples, np.random.default_rng([0, 10]))
    return generated.split(np.random.default_rng([0, 11]))


@pytest.fixture
def db_url(tmp_path) -> str:
    return f"sqlite:///{tmp_path / 'ledger.db'}"
