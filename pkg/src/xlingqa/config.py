"""Experiment configuration: one JSON document, strictly validated.

Unknown keys are rejected at every level; dotted `--set section.key=value`
overrides are applied on top of the file before validation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import presets
from .errors import ConfigError


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r} (known: {sorted(names)})")
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


@dataclass
class WorldSettings:
    num_languages: int = presets.DEFAULT_NUM_LANGUAGES
    vocab_size: int = presets.DEFAULT_VOCAB_SIZE
    tag_safety: float = 1.0


@dataclass
class CorpusSettings:
    train_size: int = presets.DEFAULT_TRAIN_SIZE
    eval_size: int = presets.DEFAULT_EVAL_SIZE

    def __post_init__(self):
        if self.train_size < 1 or self.eval_size < 1:
            raise ConfigError("corpus sizes must be positive")


@dataclass
class EncoderSettings:
    preset: str = "desk"
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.preset not in presets.ENCODER_PRESETS:
            raise ConfigError(
                f"unknown encoder preset {self.preset!r}; choose from {sorted(presets.ENCODER_PRESETS)}"
            )


@dataclass
class TrainSettings:
    method: str = "zs"
    learning_rate: float = presets.DESK_LEARNING_RATE
    weight_decay: float = presets.DESK_WEIGHT_DECAY
    epochs: int | None = None  # None -> per-method default
    batch_size: int = presets.DESK_BATCH_SIZE
    lambda_adv: float = 1.0
    lambda_psa: float = 1.0
    lambda_qs: float = 1.0
    repr_mode: str | None = None
    doc_stride: int = presets.DESK_DOC_STRIDE
    max_answer_len: int = presets.DESK_MAX_ANSWER_LEN


@dataclass
class EvalSettings:
    doc_stride: int = presets.DESK_DOC_STRIDE
    max_answer_len: int = presets.DESK_MAX_ANSWER_LEN
    workers: int = 0


@dataclass
class CompareSettings:
    permutations: int = 10000
    max_examples: int = 10  # error-analysis dump cap


@dataclass
class ExperimentConfig:
    seed: int = 0
    strategy: str = "tq"
    eval_cells: object = "all"  # "all" or a list of [q_lang, c_lang] pairs
    world: WorldSettings = field(default_factory=WorldSettings)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    compare: CompareSettings = field(default_factory=CompareSettings)

    def __post_init__(self):
        if self.eval_cells != "all":
            if not isinstance(self.eval_cells, list) or not all(
                isinstance(c, (list, tuple)) and len(c) == 2 for c in self.eval_cells
            ):
                raise ConfigError(
                    'eval_cells must be "all" or a list of [question_lang, context_lang] pairs'
                )
            self.eval_cells = [tuple(str(x) for x in cell) for cell in self.eval_cells]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if self.eval_cells != "all":
            out["eval_cells"] = [list(c) for c in self.eval_cells]
        return out


_SECTIONS = {
    "world": WorldSettings,
    "corpus": CorpusSettings,
    "encoder": EncoderSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
    "compare": CompareSettings,
}


def config_from_dict(data: dict, where: str = "config") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object at the top level")
    known = {"seed", "strategy", "eval_cells"} | set(_SECTIONS)
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} (known: {sorted(known)})")
    kwargs = {}
    for key in ("seed", "strategy", "eval_cells"):
        if key in data:
            kwargs[key] = data[key]
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], f"{where}.{name}")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from None


def apply_overrides(data: dict, sets: list[str]) -> dict:
    """Apply `section.key=value` overrides; values parse as JSON, else string."""
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r} descends through non-object key {k!r}")
            node = nxt
        node[keys[-1]] = value
    return data


def load_config(path=None, sets: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        data: dict = {}
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: malformed config JSON ({err.msg})") from None
    data = apply_overrides(data, list(sets or ()))
    if seed is not None:
        data["seed"] = seed
    return config_from_dict(data, where=str(path) if path else "config")
