import numpy as np
import pytest

from peftlab import data as D
from peftlab import model as M


@pytest.fixture(scope="session")
def tiny_world():
    """Small cohort, vocabulary, and model config shared by slow-ish tests."""
    examples = D.generate_cohort("sepsis", 24, 0)
    vocab = D.build_vocab(examples)
    cfg = M.ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2,
                        n_enc_layers=1, n_dec_layers=1, d_ff=32, max_seq_len=160)
    return examples, vocab, cfg


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
