import numpy as np
import pytest

from project.tasks import ByteTokenizer, build_supervised_record, synth_generate
from project.transformer import ModelConfig, init_model

# Prompts of the short synthetic task fit in 192 positions.
TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq=192, seed=0)
# Large init and a small vocabulary keep finite differences well conditioned.
GRAD_CONFIG = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, vocab_size=64, max_seq=8, seed=3, init_std=0.2)


def short_task(seed: int, n: int):
    return synth_generate(seed, n, 6, 3, 2, distractor_facts=0, distractor_rules=0, world_seed=0)


@pytest.fixture
def tokenizer():
    return ByteTokenizer()


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return init_model(TINY)


@pytest.fixture
def train_examples():
    return short_task(1, 16)


@pytest.fixture
def eval_examples():
    return short_task(2, 8)


@pytest.fixture
def train_records(train_examples, tokenizer):
    return [build_supervised_record(ex, tokenizer, TINY.max_seq) for ex in train_examples]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_prompts():
    """32 random token sequences of varying length over the byte vocabulary."""
    gen = np.random.default_rng(99)
    return [gen.integers(0, 261, size=gen.integers(2, 24)).tolist() for _ in range(32)]
