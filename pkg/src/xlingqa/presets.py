"""Model and experiment presets.

The desk preset is small enough to train from scratch on a CPU in
minutes; the reference preset mirrors a full-size encoder and exists for
configuration completeness, not for routine runs.
"""

from __future__ import annotations

from .errors import ConfigError
from .model import EncoderConfig
from .trainer import TrainConfig, parse_method

DESK_DOC_STRIDE = 16
DESK_MAX_ANSWER_LEN = 8
REFERENCE_DOC_STRIDE = 128
REFERENCE_MAX_ANSWER_LEN = 30

DESK_LEARNING_RATE = 1e-3
REFERENCE_LEARNING_RATE = 3e-5
DESK_WEIGHT_DECAY = 0.0  # calibrated by the acceptance recipe where needed
DESK_BATCH_SIZE = 16
ZS_DEFAULT_EPOCHS = 3  # English-only training gets extra passes
DEFAULT_EPOCHS = 1

DEFAULT_NUM_LANGUAGES = 5
DEFAULT_VOCAB_SIZE = 2048
DEFAULT_TRAIN_SIZE = 2000
DEFAULT_EVAL_SIZE = 60


def desk_encoder(vocab_size: int = DEFAULT_VOCAB_SIZE, seed: int = 0, dropout_rate: float = 0.1) -> EncoderConfig:
    return EncoderConfig(
        num_layers=2,
        num_heads=2,
        hidden_dim=64,
        ff_dim=256,
        vocab_size=vocab_size,
        max_seq_len=64,
        dropout_rate=dropout_rate,
        seed=seed,
    )


def reference_encoder(vocab_size: int, seed: int = 0, dropout_rate: float = 0.1) -> EncoderConfig:
    return EncoderConfig(
        num_layers=12,
        num_heads=12,
        hidden_dim=768,
        ff_dim=3072,
        vocab_size=vocab_size,
        max_seq_len=384,
        dropout_rate=dropout_rate,
        seed=seed,
    )


ENCODER_PRESETS = {"desk": desk_encoder, "reference": reference_encoder}


def encoder_from_preset(name: str, vocab_size: int, seed: int, dropout_rate: float = 0.1) -> EncoderConfig:
    try:
        builder = ENCODER_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(ENCODER_PRESETS)}") from None
    return builder(vocab_size=vocab_size, seed=seed, dropout_rate=dropout_rate)


def default_epochs(method: str) -> int:
    return ZS_DEFAULT_EPOCHS if method.lower() == "zs" else DEFAULT_EPOCHS


def desk_train_config(method: str, seed: int = 0, **overrides) -> TrainConfig:
    """TrainConfig with desk-scale defaults; keyword overrides win."""
    parse_method(method)
    values = dict(
        method=method,
        learning_rate=DESK_LEARNING_RATE,
        weight_decay=DESK_WEIGHT_DECAY,
        epochs=default_epochs(method),
        batch_size=DESK_BATCH_SIZE,
        seed=seed,
        doc_stride=DESK_DOC_STRIDE,
        max_answer_len=DESK_MAX_ANSWER_LEN,
    )
    values.update(overrides)
    return TrainConfig(**values)
