import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from teqkit.model import ModelConfig, build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(d_model=32, n_heads=2, n_layers=1, vocab_size=67, max_seq_len=32)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=7)


@pytest.fixture(scope="session")
def desk_config():
    return ModelConfig(d_model=64, n_heads=4, n_layers=2, vocab_size=259, max_seq_len=128)


def make_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like filler text for training/evaluation."""
    words = (
        "the quick brown fox jumps over a lazy dog while rain falls on "
        "green hills and rivers run toward distant seas under pale light "
        "morning birds sing small songs about warm wind and old stone walls"
    ).split()
    rng = np.random.default_rng(seed)
    parts = []
    size = 0
    while size < n_bytes:
        sentence = " ".join(rng.choice(words, size=rng.integers(5, 12)))
        parts.append(sentence + ". ")
        size += len(parts[-1])
    return "".join(parts).encode()[:n_bytes]
