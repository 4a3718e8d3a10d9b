"""Cross-lingual extractive QA laboratory on synthetic languages.

Implements three transfer strategies for span-extraction QA — translation
augmentation, adversarial language-invariance training, and paired
English/translation arbitration — on deterministic synthetic corpora,
with a from-scratch reverse-mode autodiff engine and transformer encoder.
"""

from .version import VERSION as __version__  # noqa: F401

from . import autodiff  # noqa: F401
from .augment import (  # noqa: F401
    IdentityTranslator,
    SyntheticTranslator,
    align_answer,
    build_translate_all,
    build_translate_c,
    build_translate_q,
    build_translate_qc,
)
from .config import ExperimentConfig, load_config  # noqa: F401
from .corpus import (  # noqa: F401
    RawExample,
    World,
    generate_examples,
    generate_world,
    read_jsonl,
    read_world,
    write_jsonl,
    write_world,
)
from .errors import CheckpointError, ConfigError, DataError, NumericError  # noqa: F401
from .evalkit import evaluate, fisher_test, token_f1  # noqa: F401
from .model import Discriminator, EncoderConfig, QAModel, extract_answer, pack_input  # noqa: F401
from .objectives import (  # noqa: F401
    adversarial_loss,
    discriminator_loss,
    psa_loss,
    qa_loss,
    qs_loss,
)
from .pipeline import run_paper_pipeline  # noqa: F401
from .trainer import (  # noqa: F401
    AdamState,
    TrainConfig,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train_adversarial,
    train_laf,
    train_supervised,
)
