import numpy as np
import pytest

from contactnav.config import RunConfig


@pytest.fixture
def cfg() -> RunConfig:
    return RunConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def tiny_training_config(**overrides) -> RunConfig:
    """Small but real config for fast training-loop tests."""
    from contactnav.config import config_from_dict

    base = RunConfig().to_dict()
    base["training"]["num_envs"] = 4
    base["training"]["horizon"] = 16
    base["training"]["minibatch_size"] = 32
    base["training"]["total_steps"] = 4 * 16 * 2
    base["training"]["checkpoint_every"] = 1
    for key, value in overrides.items():
        node = base
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return config_from_dict(base)
