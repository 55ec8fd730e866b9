import numpy as np
import pytest

from truncpose.config import RunConfig
from truncpose.model import TrainConfig, init_regressor, train
from truncpose.synth import generate_pools


def small_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    cfg.pool_sizes = {"labeled-train": 80, "labeled-val": 30,
                      "unlabeled": 400, "test": 260}
    cfg.pretrain_iters = 600
    cfg.round_iters = 400
    cfg.eval_interval = 100
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="session")
def small_pools():
    return generate_pools(small_config())


@pytest.fixture(scope="session")
def rough_model(small_pools):
    """A briefly trained regressor: far from converged, but its
    predictions respond to the input, which is all most tests need."""
    cfg = TrainConfig(max_iters=400, eval_interval=100, seed=3)
    model, _ = train(init_regressor(11), small_pools["labeled-train"],
                     small_pools["labeled-val"], cfg)
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
