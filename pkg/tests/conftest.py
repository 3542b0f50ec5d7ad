import numpy as np
import pytest

from mailpp import rng
from mailpp.encoder import EncoderConfig, init_dual_encoder


@pytest.fixture
def tiny_cfg():
    return EncoderConfig(L=2, d_t=8, d_v=12, n_heads=2, N_t=6, N_v=5, mlp_ratio=2, vocab_size=24)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_dual_encoder(tiny_cfg, rng.derive(11, "tiny-model"), np.float64)


@pytest.fixture
def tiny_model_f32(tiny_cfg):
    return init_dual_encoder(tiny_cfg, rng.derive(11, "tiny-model"), np.float32)
