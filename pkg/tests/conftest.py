"""Shared fixtures: small worlds and models sized for fast tests."""

from __future__ import annotations

import numpy as np
import pytest

from xlingqa import corpus
from xlingqa.model import EncoderConfig, QAModel


@pytest.fixture(scope="session")
def tiny_world():
    """Two synthetic languages over a small vocabulary."""
    return corpus.generate_world(7, num_languages=2, vocab_size=256)


@pytest.fixture(scope="session")
def tiny_examples(tiny_world):
    return corpus.generate_examples(tiny_world, 48, 7, id_prefix="tiny")


@pytest.fixture(scope="session")
def desk_world():
    """Five synthetic languages at the default vocabulary size."""
    return corpus.generate_world(0, num_languages=5, vocab_size=2048)


def small_encoder_config(vocab_size: int = 32, dropout_rate: float = 0.0, seed: int = 1) -> EncoderConfig:
    return EncoderConfig(
        num_layers=2,
        num_heads=2,
        hidden_dim=8,
        ff_dim=16,
        vocab_size=vocab_size,
        max_seq_len=16,
        dropout_rate=dropout_rate,
        seed=seed,
    )


@pytest.fixture()
def small_model():
    """2-layer, 8-dim encoder over a 32-token vocabulary, dropout off."""
    return QAModel.initialize(small_encoder_config(), ["en", "xx"])


def rand_params(rng: np.random.Generator, **shapes):
    from xlingqa.autodiff import Tensor

    return {
        name: Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=True)
        for name, shape in shapes.items()
    }
