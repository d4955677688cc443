import numpy as np
import pytest
import torch

from echoreg.data import PhantomParams, generate_phantom

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def phantom_case():
    return generate_phantom(PhantomParams(frames=6, seed=3))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
