import numpy as np
import pytest

from src.configs import AdapterConfig, ModelConfig, TaskConfig, TrainerConfig, TrainingMode
from src.masking.attention_mask import Segmentation
from src.models.transformer import init_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """2 layers, d_model 16: the gradient-check instance."""
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=16, max_seq_len=16, seed=3)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


@pytest.fixture
def small_config():
    """4 layers over the task vocabulary, small enough for many training steps."""
    return ModelConfig(n_layers=4, n_heads=2, d_model=32, d_ff=64, vocab_size=64, max_seq_len=64, seed=0)


@pytest.fixture
def small_task():
    return TaskConfig(seq_len=48, n_context_turns=2, n_train=8, n_eval=4, seed=0)


@pytest.fixture
def adapter_config():
    return AdapterConfig(rank=4, alpha=8.0, layer_fraction=0.5, seed=0)


@pytest.fixture
def trainer_config():
    return TrainerConfig(mode=TrainingMode.FOCUSFT, inner_steps=2, eta_in=1e-2, lr=1e-3, epochs=1,
                         log_every=0, seed=0)


@pytest.fixture
def tiny_segmentation():
    """T = 12: a context turn of 7, a response of 3, then a context turn of 2."""
    return Segmentation.from_string("CCCCCCCRRRCC", [0] * 7 + [1] * 3 + [2] * 2)


@pytest.fixture
def tiny_tokens(rng, tiny_config):
    return [int(t) for t in rng.integers(0, tiny_config.vocab_size, size=12)]
