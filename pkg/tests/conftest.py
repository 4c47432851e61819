import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from eqspike.model import ModelConfig, init_params

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def toy_params(seed=0, **overrides):
    """Small model with weights large enough to fire at init."""
    fields = dict(vocab_size=6, seq_len=4, d_emb=8, d_intermediate=16, n_encoders=1, n_heads=2, init_std=0.5)
    fields.update(overrides)
    return init_params(ModelConfig(**fields), np.random.default_rng(seed))


def toy_tokens(params, batch=2, seed=0):
    cfg = params.config
    return np.random.default_rng(seed + 1000).integers(0, cfg.vocab_size, size=(batch, cfg.seq_len))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
