import numpy as np
import pytest

from trimodal.model import ModelConfig, TriModalModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_MODEL = dict(hidden_dim=16, heads=2, n_blocks=2, encoder_depth=2,
                   feat_dim=10, n_genes=8, n_bins=5, vocab_size=16,
                   max_text_len=9, region_a=2, region_b=2)


@pytest.fixture
def small_model():
    return TriModalModel(ModelConfig(**SMALL_MODEL), seed=3)


@pytest.fixture
def small_model_generic():
    """Same shape but with non-zero residual branches (generic gradients)."""
    return TriModalModel(ModelConfig(**SMALL_MODEL, zero_residual=False), seed=3)
