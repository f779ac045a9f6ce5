import numpy as np
import pytest
import torch

from gridhaze import haze_model
from gridhaze.network import GridConfig

# tiny: gradient checks / shape checks; small: short training runs
TINY = dict(scale_channels=(4, 8, 16), growth_rate=4, cab_reduction=16)
SMALL = dict(scale_channels=(8, 16, 32), growth_rate=8)


def tiny_config(**overrides):
    return GridConfig(**{**TINY, **overrides})


def small_config(**overrides):
    return GridConfig(**{**SMALL, **overrides})


@pytest.fixture(scope="session")
def dataset8():
    """8 synthetic 48x48 pairs shared by training tests."""
    return haze_model.make_dataset(8, seed=11, size=(48, 48))


@pytest.fixture(scope="session")
def translated12():
    """12 translated 48x48 pairs for finetuning tests."""
    return haze_model.make_dataset(
        12, seed=13, size=(48, 48), domain_shift=haze_model.DomainShiftParams()
    )


def dyadic_random(rng, shape, scale=1.0):
    """Random values on a 2^-10 grid: pooling sums are exact in float32/64,
    so permutation-invariance checks can assert bitwise equality."""
    return (rng.integers(0, 1024, size=shape) / 1024.0 * scale).astype(np.float64)


def to_t(arr, dtype=torch.float32):
    return torch.from_numpy(np.asarray(arr)).to(dtype)
