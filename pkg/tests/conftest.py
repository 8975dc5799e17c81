import numpy as np
import pytest

from rspca.datagen import SimConfig, generate_oc_stream, generate_raw
from rspca.experiments import fit_variant


@pytest.fixture(scope="session")
def desk_setup():
    """RSPCA fit on contaminated desk-scale block data plus its generator config."""
    cfg = SimConfig.desk(n=300, delta=0.1, seed=21)
    raw, truth = generate_raw(cfg)
    model = fit_variant(raw, "rs", 3)
    return cfg, truth, model


@pytest.fixture(scope="session")
def incontrol_source(desk_setup):
    cfg = desk_setup[0]
    return lambda k, rng: generate_oc_stream(cfg, 0.0, k, int(rng.integers(2**31)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
