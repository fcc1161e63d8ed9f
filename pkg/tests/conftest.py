import numpy as np
import pytest

from galnet.data import SyntheticConfig, generate_synthetic
from galnet.model import BlockSpec, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model_config(variant="gal_j", m=3, **kw):
    """8x8x1 input, one backbone block: fast enough for exhaustive checks."""
    base = dict(
        num_attributes=m,
        input_shape=(8, 8, 1),
        backbone=(BlockSpec(4),),
        branch_channels=3,
        projection_channels=2,
        pse_hidden=2,
        variant=variant,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_synthetic():
    cfg = SyntheticConfig(num_attributes=4, num_factors=2, height=8, width=8, n_train=64, n_eval=32, seed=3)
    return cfg, generate_synthetic(cfg), generate_synthetic(cfg, "eval")
