import warnings

import numpy as np
import pytest

from surropt.campaign import RunConfig, cmd_fit, cmd_sample


@pytest.fixture(scope="session")
def brewery_fit():
    """One shared sampling + fitting pass over the synthetic brewery box."""
    cfg = RunConfig(black_box="brewery", n_static=32, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        datasets = cmd_sample(cfg)
        fit = cmd_fit(cfg, datasets)
    return cfg, datasets, fit


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
