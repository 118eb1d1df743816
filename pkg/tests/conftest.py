import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    from slimformer.encoder import ModelConfig

    return ModelConfig(
        num_layers=2,
        hidden_dim=16,
        num_heads=4,
        ffn_dim=24,
        vocab_size=40,
        max_seq_len=12,
        num_labels=3,
    )
