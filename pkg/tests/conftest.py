from pathlib import Path

import pytest
import yaml

from hri_intent.data import Env, fit_standardizer, save_dataset, standardize_records
from hri_intent.mintrvae import RvaeHyper
from hri_intent.toydata import make_toy_dataset


@pytest.fixture
def toy_records():
    return make_toy_dataset(n_sequences=10, length=40, positive_fraction=0.6, seed=3)


@pytest.fixture
def standardized_toy(toy_records):
    return standardize_records(toy_records, fit_standardizer(toy_records))


@pytest.fixture
def small_hyper() -> RvaeHyper:
    return RvaeHyper(
        latent_dim=4,
        mlp_dims=(16, 8),
        hidden_dim=8,
        epochs=3,
        warmup_epochs=2,
        batch_size=8,
        log_interval=0,
    )


@pytest.fixture
def toy_dataset_file(tmp_path: Path) -> Path:
    """Env1, Env2 and Env3 toy sequences, mostly positive with early onsets"""
    records = []
    for offset, env in enumerate(Env):
        records += make_toy_dataset(
            n_sequences=10,
            length=40,
            positive_fraction=0.8,
            seed=10 + offset,
            env=env,
            onset_range=(0.2, 0.4),
        )
    path = tmp_path / "toy.jsonl"
    save_dataset(records, path)
    return path


@pytest.fixture
def tiny_config(tmp_path: Path, toy_dataset_file: Path) -> Path:
    config = {
        "seed": 1,
        "paths": {"dataset": str(toy_dataset_file), "out": str(tmp_path / "run")},
        "data": {"window": 15, "stride": 5, "folds": 2},
        "vae": {
            "latent_dim": 4,
            "mlp_dims": [16, 8],
            "hidden_dim": 8,
            "epochs": 2,
            "warmup_epochs": 2,
            "log_interval": 0,
        },
        "generation": {"n": 100},
        "detector": {"backbone": "gru", "hidden": 8, "epochs": 2, "patience": 2},
        "discriminator": {"hidden": 4, "epochs": 1},
    }
    path = tmp_path / "tiny.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config, f)
    return path
