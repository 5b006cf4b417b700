from pathlib import Path

import numpy as np
import pytest
import torch

from cwdm.checkpoint import Registry
from cwdm.config import TOY_OVERRIDES, RunConfig, apply_overrides
from cwdm.data import generate_toy_dataset
from cwdm.trainer import train_all

torch.set_num_threads(1)


def tiny_config(root=None, **overrides) -> RunConfig:
    """Toy preset shrunk further so a model trains in a couple of seconds."""
    cfg = apply_overrides(RunConfig(), dict(TOY_OVERRIDES))
    apply_overrides(
        cfg,
        {
            "schedule.T": 10,
            "model.timesteps": 10,
            "train.iterations": 20,
            "train.checkpoint_every": 10,
            "data.root": str(root) if root is not None else None,
            **overrides,
        },
    )
    return cfg.validate()


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("toy16")
    generate_toy_dataset(3, (16, 16, 16), 11, root)
    return root


@pytest.fixture(scope="session")
def toy_registry(tmp_path_factory, toy_root) -> Path:
    """registry.tsv for four tiny models trained on ``toy_root``."""
    out = tmp_path_factory.mktemp("models")
    manifest, failures = train_all(tiny_config(toy_root), out)
    assert not failures
    return manifest


@pytest.fixture
def registry(toy_registry) -> Registry:
    return Registry.read(toy_registry)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
