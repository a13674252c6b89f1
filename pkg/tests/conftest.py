"""Shared fixtures: expensive trained artifacts built once per session."""

import pytest

from subattack.core import ClassSpace, ToyDatasetSpec, generate_toy_dataset
from subattack.generator import train_autoencoder_backend
from subattack.harness import TargetRecipe, train_target


@pytest.fixture(scope="session")
def toy_space():
    return ClassSpace.toy(10)


@pytest.fixture(scope="session")
def trained_ae_backend(toy_space):
    """Conv autoencoder trained offline on the canonical toy dataset."""
    data = generate_toy_dataset(ToyDatasetSpec(10, 32, 60, seed=42))
    return train_autoencoder_backend(toy_space, data, seed=0, steps=400)


@pytest.fixture(scope="session")
def trained_target():
    """A well-fit victim on the canonical 10-class toy dataset (seed 11)."""
    dataset = generate_toy_dataset(ToyDatasetSpec(10, 32, 100, seed=11))
    model, info = train_target(dataset, TargetRecipe(epochs=20), seed=3)
    return model, info, dataset
