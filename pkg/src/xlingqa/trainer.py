"""Training regimes: supervised span training, adversarial training, and
language arbitration, plus Adam and binary checkpointing.

Determinism contract: (seed, config, dataset) fully determine the final
parameters. Batch order is a seeded permutation per epoch, and dropout
noise is drawn from a per-(step, phase) stream, so a run resumed from a
checkpoint replays exactly the same trajectory as an unbroken run.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import objectives
from .autodiff import Tensor
from .corpus import RawExample, Vocabulary, shuffle_fact_order
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .model import (
    Discriminator,
    EncoderConfig,
    PackedInput,
    QAModel,
    pack_input,
    qa_forward,
    question_repr,
)

_STREAM_SHUFFLE = 11
_STREAM_DROPOUT = 13
_STREAM_PROBE = 17
_STREAM_FACTS = 19

SUPERVISED_METHODS = ("zs", "tq", "tc", "tqc", "tall")


@dataclass
class TrainConfig:
    method: str = "zs"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    repr_mode: str | None = None  # None picks cls for adversarial, avg for laf
    lambda_adv: float = 1.0
    lambda_psa: float = 1.0
    lambda_qs: float = 1.0
    doc_stride: int = 16
    max_answer_len: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        for name in ("lambda_adv", "lambda_psa", "lambda_qs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.repr_mode not in (None, "cls", "avg"):
            raise ConfigError(f"unknown repr_mode {self.repr_mode!r}")
        parse_method(self.method)


def parse_method(method: str) -> tuple[str, str | None, str | None]:
    """Split a method name into (kind, variant, target language).

    Kinds: supervised (zs/tq/tc/tqc/tall), adversarial (at-all, at-<lang>),
    laf (laf-psa-*, laf-psaqs-*). The target is 'all' or a language code.
    """
    m = method.lower()
    if m in SUPERVISED_METHODS:
        return "supervised", None, None
    if m.startswith("at-"):
        target = m[3:]
        if not target:
            raise ConfigError(f"adversarial method needs a target, got {method!r}")
        return "adversarial", None, target
    if m.startswith("laf-"):
        rest = m[4:].split("-", 1)
        if len(rest) == 2 and rest[0] in ("psa", "psaqs") and rest[1]:
            return "laf", rest[0], rest[1]
        raise ConfigError(f"unknown arbitration method {method!r}")
    raise ConfigError(f"unknown training method {method!r}")


@dataclass
class AdamState:
    """First/second moment estimates and step count for one parameter set."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def _decays(name: str) -> bool:
    """Weight decay applies to weight matrices and embeddings only.

    Norm gains and every bias vector are excluded, matching the usual
    decoupled-decay convention.
    """
    last = name.rsplit(".", 1)[-1]
    return not (last.startswith("b") or last == "gain")


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    weight_decay: float = 0.0,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update, applied in place.

    weight_decay > 0 adds decoupled decay (AdamW): after the moment-based
    update, decayable parameters shrink by learning_rate * weight_decay.
    """
    if learning_rate <= 0:
        raise ConfigError(f"learning_rate must be positive, got {learning_rate}")
    if weight_decay < 0:
        raise ConfigError(f"weight_decay must be non-negative, got {weight_decay}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        try:
            g = grads[name]
        except KeyError:
            raise ValueError(f"missing gradient for parameter {name!r}") from None
        if g.shape != p.data.shape:
            raise ad.ShapeError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {p.data.shape}"
            )
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        update = learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if weight_decay > 0.0 and _decays(name):
            update = update + learning_rate * weight_decay * p.data
        p.data = p.data - update
    return params


def _dropout_rng(seed: int, step: int, phase: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_DROPOUT, step, phase])


def _schedule(
    n_units: int, config: TrainConfig, start_step: int
) -> Iterable[tuple[int, list[int]]]:
    """Seeded per-epoch shuffles, resumable from any step index."""
    steps_per_epoch = math.ceil(n_units / config.batch_size)
    total = config.epochs * steps_per_epoch
    perm: np.ndarray | None = None
    perm_epoch = -1
    for step in range(start_step, total):
        epoch, k = divmod(step, steps_per_epoch)
        if epoch != perm_epoch:
            perm = np.random.default_rng([config.seed, _STREAM_SHUFFLE, epoch]).permutation(n_units)
            perm_epoch = epoch
        yield step, [int(i) for i in perm[k * config.batch_size : (k + 1) * config.batch_size]]


def _resolve_schedule(
    n_units: int,
    config: TrainConfig,
    start_step: int,
    batch_stream: Sequence[Sequence[int]] | None,
) -> Iterable[tuple[int, list[int]]]:
    if batch_stream is None:
        return _schedule(n_units, config, start_step)
    return ((step, list(idxs)) for step, idxs in enumerate(batch_stream, start=start_step))


class _Trace:
    """Accumulates per-step metrics; optionally streams them to a CSV file."""

    def __init__(self, path=None):
        self.values: dict[str, list[float]] = {}
        self._fh = open(path, "w", newline="", encoding="utf-8") if path else None
        self._writer = None
        if self._fh:
            self._writer = csv.writer(self._fh)
            self._writer.writerow(["step", "name", "value"])

    def add(self, step: int, name: str, value: float) -> None:
        self.values.setdefault(name, []).append(value)
        if self._writer:
            self._writer.writerow([step, name, repr(float(value))])

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _check_finite(value: float, name: str, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{name} became non-finite at step {step}")


def pack_examples(
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    config: EncoderConfig,
    doc_stride: int,
    require_answer: bool = True,
) -> list[PackedInput]:
    """Convert raw examples to packed windows; optionally keep only those
    that contain their answer."""
    out: list[PackedInput] = []
    for ex in examples:
        q_ids = [vocab.id_or_unk(t) for t in ex.question]
        c_ids = [vocab.id_or_unk(t) for t in ex.context]
        windows = pack_input(
            q_ids, c_ids, (ex.answer.begin, ex.answer.end), config, doc_stride, ex.id
        )
        for w in windows:
            if not require_answer or w.answer is not None:
                out.append(w)
    return out


def _pack_single(ex: RawExample, vocab: Vocabulary, config: EncoderConfig, doc_stride: int) -> PackedInput:
    q_ids = [vocab.id_or_unk(t) for t in ex.question]
    c_ids = [vocab.id_or_unk(t) for t in ex.context]
    windows = pack_input(q_ids, c_ids, (ex.answer.begin, ex.answer.end), config, doc_stride, ex.id)
    if len(windows) != 1:
        raise DataError(
            f"example {ex.id} spans {len(windows)} windows; paired training needs single-window examples"
        )
    if windows[0].answer is None:
        raise DataError(f"example {ex.id} lost its answer during packing")
    return windows[0]


def _collect_grads(
    params: dict[str, Tensor], grad_map: dict[int, Tensor], tape: ad.Tape
) -> dict[str, np.ndarray]:
    """Map backward() output onto parameter names; absent leaves get zeros."""
    out = {}
    for name, p in params.items():
        if p.tape is tape and p.node is not None and p.node in grad_map:
            out[name] = grad_map[p.node].data
        else:
            out[name] = np.zeros_like(p.data)
    return out


def train_supervised(
    model: QAModel,
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    config: TrainConfig,
    *,
    trace_path=None,
    batch_stream: Sequence[Sequence[int]] | None = None,
    start_step: int = 0,
    adam: AdamState | None = None,
    epoch_transform: Callable[[Sequence[RawExample], int], Sequence[RawExample]] | None = None,
) -> dict[str, list[float]]:
    """Mini-batch span training; returns the loss trace.

    epoch_transform, when given, maps (examples, epoch) to the example list
    actually trained on during that epoch (e.g. a deterministic fact-order
    reshuffle). The transform must not change the number of packed windows.
    """
    units = pack_examples(examples, vocab, model.config, config.doc_stride)
    if not units:
        raise DataError("no trainable windows in the dataset")
    steps_per_epoch = math.ceil(len(units) / config.batch_size)
    current_epoch = -1
    params = model.named_parameters()
    adam = adam or AdamState.from_params(params)
    trace = _Trace(trace_path)
    try:
        for step, idxs in _resolve_schedule(len(units), config, start_step, batch_stream):
            if epoch_transform is not None:
                epoch = step // steps_per_epoch
                if epoch != current_epoch:
                    current_epoch = epoch
                    refreshed = pack_examples(
                        epoch_transform(examples, epoch), vocab, model.config, config.doc_stride
                    )
                    if len(refreshed) != len(units):
                        raise DataError(
                            "epoch_transform changed the packed window count "
                            f"({len(units)} -> {len(refreshed)})"
                        )
                    units = refreshed
            rng = _dropout_rng(config.seed, step, 0)
            with ad.Tape() as tape:
                total = None
                for i in idxs:
                    w = units[i]
                    pred = model.forward(w, rng)
                    li = objectives.qa_loss(pred, w.answer[0], w.answer[1])
                    total = li if total is None else ad.add(total, li)
                loss = ad.mul(total, 1.0 / len(idxs))
                value = loss.item()
                _check_finite(value, "qa_loss", step)
                grad_map = ad.backward(loss)
            adam_step(params, _collect_grads(params, grad_map, tape), adam, config.learning_rate,
                      weight_decay=config.weight_decay)
            trace.add(step, "qa_loss", value)
    finally:
        trace.close()
    return trace.values


def train_adversarial(
    model: QAModel,
    disc: Discriminator,
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    config: TrainConfig,
    *,
    trace_path=None,
    batch_stream: Sequence[Sequence[int]] | None = None,
    start_step: int = 0,
    adam: AdamState | None = None,
    disc_adam: AdamState | None = None,
    phase_hook: Callable[[int, str, QAModel, Discriminator], None] | None = None,
    epoch_transform: Callable[[Sequence[RawExample], int], Sequence[RawExample]] | None = None,
) -> dict[str, list[float]]:
    """Alternating adversarial training.

    Per batch: (1) forward both heads and update the encoder+span head on
    qa_loss + lambda_adv * adversarial_loss with the discriminator frozen;
    (2) re-run the encoder forward on the updated weights, detach the
    representations, and update the discriminator on its own loss.
    """
    label_index = {label: i for i, label in enumerate(disc.labels)}

    def build_units(source: Sequence[RawExample]) -> list[tuple[PackedInput, int]]:
        built: list[tuple[PackedInput, int]] = []
        for ex in source:
            if ex.q_lang not in label_index:
                raise DataError(
                    f"example {ex.id}: language {ex.q_lang!r} is not among discriminator labels {disc.labels}"
                )
            for w in pack_examples([ex], vocab, model.config, config.doc_stride):
                built.append((w, label_index[ex.q_lang]))
        return built

    units = build_units(examples)
    if not units:
        raise DataError("no trainable windows in the dataset")
    steps_per_epoch = math.ceil(len(units) / config.batch_size)
    current_epoch = -1

    repr_mode = config.repr_mode or "cls"
    params = model.named_parameters()
    disc_params = disc.named_parameters()
    adam = adam or AdamState.from_params(params)
    disc_adam = disc_adam or AdamState.from_params(disc_params)
    trace = _Trace(trace_path)
    try:
        for step, idxs in _resolve_schedule(len(units), config, start_step, batch_stream):
            if epoch_transform is not None:
                epoch = step // steps_per_epoch
                if epoch != current_epoch:
                    current_epoch = epoch
                    refreshed = build_units(epoch_transform(examples, epoch))
                    if len(refreshed) != len(units):
                        raise DataError(
                            "epoch_transform changed the packed window count "
                            f"({len(units)} -> {len(refreshed)})"
                        )
                    units = refreshed
            batch = [units[i] for i in idxs]

            # Phase 1: update the QA model; discriminator weights stay frozen.
            rng = _dropout_rng(config.seed, step, 0)
            with ad.Tape() as tape:
                qa_total = adv_total = None
                for w, _label in batch:
                    hidden = model.encode(w, rng)
                    pred = qa_forward(hidden, model.qa_head)
                    li = objectives.qa_loss(pred, w.answer[0], w.answer[1])
                    rep = question_repr(hidden, w, repr_mode)
                    ai = objectives.adversarial_loss(disc.forward(rep))
                    qa_total = li if qa_total is None else ad.add(qa_total, li)
                    adv_total = ai if adv_total is None else ad.add(adv_total, ai)
                qa_mean = ad.mul(qa_total, 1.0 / len(batch))
                adv_mean = ad.mul(adv_total, 1.0 / len(batch))
                loss = ad.add(qa_mean, ad.mul(adv_mean, config.lambda_adv))
                qa_value, adv_value = qa_mean.item(), adv_mean.item()
                _check_finite(qa_value, "qa_loss", step)
                _check_finite(adv_value, "adversarial_loss", step)
                grad_map = ad.backward(loss)
            adam_step(params, _collect_grads(params, grad_map, tape), adam, config.learning_rate,
                      weight_decay=config.weight_decay)
            if phase_hook:
                phase_hook(step, "qa_update", model, disc)

            # Phase 2: fresh detached representations, update the discriminator.
            rng2 = _dropout_rng(config.seed, step, 1)
            rows = []
            golds = []
            for w, label in batch:
                hidden = model.encode(w, rng2)
                rows.append(question_repr(hidden, w, repr_mode).data.reshape(-1))
                golds.append(label)
            reprs = Tensor(np.stack(rows))
            with ad.Tape() as tape2:
                probs = disc.forward(reprs)
                dloss = objectives.discriminator_loss_batch(probs, golds)
                d_value = dloss.item()
                _check_finite(d_value, "discriminator_loss", step)
                acc = float(np.mean(np.argmax(probs.data, axis=1) == np.asarray(golds)))
                grad_map2 = ad.backward(dloss)
            adam_step(
                disc_params,
                _collect_grads(disc_params, grad_map2, tape2),
                disc_adam,
                config.learning_rate,
            )
            if phase_hook:
                phase_hook(step, "disc_update", model, disc)

            trace.add(step, "qa_loss", qa_value)
            trace.add(step, "adversarial_loss", adv_value)
            trace.add(step, "discriminator_loss", d_value)
            trace.add(step, "discriminator_accuracy", acc)
    finally:
        trace.close()
    return trace.values


def fact_shuffle_transform(
    seed: int,
) -> Callable[[Sequence[RawExample], int], list[RawExample]]:
    """Deterministic per-epoch fact-order reshuffle for epoch_transform.

    The permutation stream is keyed by (seed, epoch, source example id), so
    translated variants sharing one English source context receive the same
    fact order and stay aligned for pairing. Non-English contexts pass
    through unchanged.
    """

    def transform(examples: Sequence[RawExample], epoch: int) -> list[RawExample]:
        out = []
        for ex in examples:
            base_id = ex.id.split("::", 1)[0]
            key = zlib.crc32(base_id.encode("utf-8"))
            rng = np.random.default_rng([seed, _STREAM_FACTS, epoch, key])
            out.append(shuffle_fact_order(ex, rng))
        return out

    return transform


def pair_examples(examples: Sequence[RawExample]) -> list[tuple[RawExample, RawExample]]:
    """Join translated examples to their English sources by id prefix."""
    base = {ex.id: ex for ex in examples if "::" not in ex.id}
    pairs = []
    for ex in examples:
        if "::" not in ex.id:
            continue
        src = ex.id.split("::", 1)[0]
        if src not in base:
            raise DataError(f"unpaired example {ex.id}: source {src!r} is missing")
        pairs.append((base[src], ex))
    if not pairs:
        raise DataError("no translated examples to pair")
    return pairs


def _pseudo_span(pred_begin: np.ndarray, pred_end: np.ndarray, en: PackedInput, tr: PackedInput) -> tuple[int, int]:
    """English argmax positions mapped into the translated window's frame.

    The argmax is taken over the English context range so the positions
    always convert; both windows hold the identical full context.
    """
    lo, hi = en.context_range
    b = int(np.argmax(pred_begin[lo:hi]))
    e = int(np.argmax(pred_end[lo:hi]))
    t_lo = tr.context_range[0]
    return b + t_lo, e + t_lo


def train_laf(
    model: QAModel,
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    config: TrainConfig,
    *,
    trace_path=None,
    batch_stream: Sequence[Sequence[int]] | None = None,
    start_step: int = 0,
    adam: AdamState | None = None,
    epoch_transform: Callable[[Sequence[RawExample], int], Sequence[RawExample]] | None = None,
) -> dict[str, list[float]]:
    """Language arbitration over paired English/translated batches.

    Per batch, up to three separate optimizer steps: (1) span loss on both
    sides; (2) span loss on the translated side against the English argmax
    pseudo-labels; (3) for the psaqs variant, one minus cosine between the
    paired average-pooled question representations. A step whose weight is
    zero is skipped entirely so it leaves no optimizer-state footprint.
    """
    kind, variant, _target = parse_method(config.method)
    if kind != "laf":
        raise ConfigError(f"train_laf got non-arbitration method {config.method!r}")

    def build_units(source: Sequence[RawExample]) -> list[tuple[PackedInput, PackedInput]]:
        return [
            (
                _pack_single(en, vocab, model.config, config.doc_stride),
                _pack_single(tr, vocab, model.config, config.doc_stride),
            )
            for en, tr in pair_examples(source)
        ]

    units = build_units(examples)
    steps_per_epoch = math.ceil(len(units) / config.batch_size)
    current_epoch = -1
    repr_mode = config.repr_mode or "avg"
    params = model.named_parameters()
    adam = adam or AdamState.from_params(params)
    use_psa = config.lambda_psa > 0
    use_qs = variant == "psaqs" and config.lambda_qs > 0
    trace = _Trace(trace_path)
    try:
        for step, idxs in _resolve_schedule(len(units), config, start_step, batch_stream):
            if epoch_transform is not None:
                epoch = step // steps_per_epoch
                if epoch != current_epoch:
                    current_epoch = epoch
                    refreshed = build_units(epoch_transform(examples, epoch))
                    if len(refreshed) != len(units):
                        raise DataError(
                            "epoch_transform changed the packed window count "
                            f"({len(units)} -> {len(refreshed)})"
                        )
                    units = refreshed
            batch = [units[i] for i in idxs]

            # Step 1: supervised span loss on both sides of every pair.
            rng = _dropout_rng(config.seed, step, 0)
            en_preds: list[tuple[np.ndarray, np.ndarray]] = []
            with ad.Tape() as tape:
                total = None
                qa_en_sum = qa_tr_sum = 0.0
                for en_w, tr_w in batch:
                    pred_en = model.forward(en_w, rng)
                    le = objectives.qa_loss(pred_en, en_w.answer[0], en_w.answer[1])
                    pred_tr = model.forward(tr_w, rng)
                    lt = objectives.qa_loss(pred_tr, tr_w.answer[0], tr_w.answer[1])
                    en_preds.append((pred_en.begin_probs().copy(), pred_en.end_probs().copy()))
                    qa_en_sum += le.item()
                    qa_tr_sum += lt.item()
                    total = le if total is None else ad.add(total, le)
                    total = ad.add(total, lt)
                loss = ad.mul(total, 1.0 / (2 * len(batch)))
                _check_finite(loss.item(), "qa_loss", step)
                grad_map = ad.backward(loss)
            adam_step(params, _collect_grads(params, grad_map, tape), adam, config.learning_rate,
                      weight_decay=config.weight_decay)
            trace.add(step, "qa_loss_en", qa_en_sum / len(batch))
            trace.add(step, "qa_loss_translated", qa_tr_sum / len(batch))

            # Step 2: pseudo-label supervision of the translated side.
            if use_psa:
                rng = _dropout_rng(config.seed, step, 1)
                with ad.Tape() as tape:
                    total = None
                    for (en_w, tr_w), (pb, pe) in zip(batch, en_preds):
                        sb, se = _pseudo_span(pb, pe, en_w, tr_w)
                        pred = model.forward(tr_w, rng)
                        li = objectives.psa_loss(pred, sb, se)
                        total = li if total is None else ad.add(total, li)
                    loss = ad.mul(total, config.lambda_psa / len(batch))
                    value = loss.item()
                    _check_finite(value, "psa_loss", step)
                    grad_map = ad.backward(loss)
                adam_step(params, _collect_grads(params, grad_map, tape), adam, config.learning_rate,
                      weight_decay=config.weight_decay)
                trace.add(step, "psa_loss", value / max(config.lambda_psa, 1e-300))

            # Step 3: pull paired question representations together.
            if use_qs:
                rng = _dropout_rng(config.seed, step, 2)
                with ad.Tape() as tape:
                    total = None
                    cos_sum = 0.0
                    for en_w, tr_w in batch:
                        h_en = question_repr(model.encode(en_w, rng), en_w, repr_mode)
                        h_tr = question_repr(model.encode(tr_w, rng), tr_w, repr_mode)
                        li = objectives.qs_loss(h_en, h_tr)
                        cos_sum += 1.0 - li.item()
                        total = li if total is None else ad.add(total, li)
                    loss = ad.mul(total, config.lambda_qs / len(batch))
                    value = loss.item()
                    _check_finite(value, "qs_loss", step)
                    grad_map = ad.backward(loss)
                adam_step(params, _collect_grads(params, grad_map, tape), adam, config.learning_rate,
                      weight_decay=config.weight_decay)
                trace.add(step, "qs_loss", value / max(config.lambda_qs, 1e-300))
                trace.add(step, "mean_cosine", cos_sum / len(batch))
    finally:
        trace.close()
    return trace.values


def representation_rows(
    model: QAModel, windows: Sequence[PackedInput], mode: str
) -> np.ndarray:
    """Stack question representations for a list of windows, shape (n, d)."""
    rows = [
        question_repr(model.encode(w), w, mode).data.reshape(-1) for w in windows
    ]
    return np.stack(rows)


def probe_discriminator(
    model: QAModel,
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    labels: Sequence[str],
    *,
    seed: int,
    doc_stride: int = 16,
    repr_mode: str = "cls",
    epochs: int = 30,
    learning_rate: float = 1e-3,
    batch_size: int = 64,
    train_fraction: float = 0.8,
) -> tuple[Discriminator, float]:
    """Train a fresh language probe on frozen representations.

    Returns the probe and its held-out accuracy. The encoder is never
    updated; representations are computed once up front.
    """
    label_index = {label: i for i, label in enumerate(labels)}
    windows = []
    golds = []
    for ex in examples:
        if ex.q_lang not in label_index:
            raise DataError(f"example {ex.id}: language {ex.q_lang!r} not in probe labels")
        q_ids = [vocab.id_or_unk(t) for t in ex.question]
        c_ids = [vocab.id_or_unk(t) for t in ex.context]
        windows.append(pack_input(q_ids, c_ids, None, model.config, doc_stride, ex.id)[0])
        golds.append(label_index[ex.q_lang])
    features = representation_rows(model, windows, repr_mode)
    targets = np.asarray(golds)

    rng = np.random.default_rng([seed, _STREAM_PROBE])
    perm = rng.permutation(len(windows))
    n_train = max(1, int(len(windows) * train_fraction))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    if len(test_idx) == 0:
        raise DataError("probe needs at least one held-out example")

    # Standardize per dimension on the training split so low-variance
    # directions are as visible to the probe as dominant ones.
    mu = features[train_idx].mean(axis=0, keepdims=True)
    sd = features[train_idx].std(axis=0, keepdims=True)
    features = (features - mu) / (sd + 1e-8)

    disc = Discriminator.initialize(model.config.hidden_dim, labels, seed)
    disc_params = disc.named_parameters()
    state = AdamState.from_params(disc_params)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, _STREAM_PROBE, epoch + 1]).permutation(len(train_idx))
        for k in range(0, len(order), batch_size):
            chosen = train_idx[order[k : k + batch_size]]
            reprs = Tensor(features[chosen])
            with ad.Tape() as tape:
                probs = disc.forward(reprs)
                loss = objectives.discriminator_loss_batch(probs, targets[chosen].tolist())
                grad_map = ad.backward(loss)
            adam_step(disc_params, _collect_grads(disc_params, grad_map, tape), state, learning_rate)

    test_probs = disc.forward(Tensor(features[test_idx])).data
    accuracy = float(np.mean(np.argmax(test_probs, axis=1) == targets[test_idx]))
    return disc, accuracy


# --- checkpoint container -------------------------------------------------

_FORMAT_VERSION = 1


@dataclass
class LoadedCheckpoint:
    model: QAModel
    disc: Discriminator | None
    adam: AdamState | None
    disc_adam: AdamState | None
    header: dict


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint file is truncated")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape)
    return name, np.array(data, dtype=np.float64)


def save_checkpoint(
    path,
    model: QAModel,
    disc: Discriminator | None = None,
    adam: AdamState | None = None,
    disc_adam: AdamState | None = None,
    extra: dict | None = None,
) -> None:
    """Serialize model (and optional discriminator/optimizer state) atomically.

    Layout: length-prefixed JSON header {format version, encoder config,
    language labels, seed, extra}, then named float64 tensors.
    """
    header = {
        "format_version": _FORMAT_VERSION,
        "encoder_config": asdict(model.config),
        "languages": list(model.languages),
        "seed": model.config.seed,
        "extra": extra or {},
    }
    if disc is not None:
        header["disc_labels"] = list(disc.labels)

    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.params.items()]
    if disc is not None:
        tensors += [(n, p.data) for n, p in disc.params.items()]
    if adam is not None:
        tensors += [(f"adam.m::{n}", a) for n, a in adam.m.items()]
        tensors += [(f"adam.v::{n}", a) for n, a in adam.v.items()]
        tensors.append(("adam.t", np.asarray(float(adam.t))))
    if disc_adam is not None:
        tensors += [(f"dadam.m::{n}", a) for n, a in disc_adam.m.items()]
        tensors += [(f"dadam.v::{n}", a) for n, a in disc_adam.v.items()]
        tensors.append(("dadam.t", np.asarray(float(disc_adam.t))))

    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
    os.replace(tmp, path)


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint back; every named tensor must match its slot."""
    try:
        fh = open(path, "rb")
    except OSError as err:
        raise CheckpointError(f"cannot open checkpoint {path}: {err}") from None
    with fh:
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError("checkpoint header is not valid JSON") from None
        version = header.get("format_version")
        if version != _FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version!r}")
        try:
            config = EncoderConfig(**header["encoder_config"])
            languages = list(header["languages"])
        except (KeyError, TypeError, ConfigError) as err:
            raise CheckpointError(f"bad checkpoint header: {err}") from None

        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        loaded: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            name, arr = _read_tensor(fh)
            if name in loaded:
                raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
            loaded[name] = arr

    model = QAModel.initialize(config, languages)
    for name, p in model.params.items():
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing model tensor {name!r}")
        arr = loaded.pop(name)
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr

    disc = None
    disc_labels = header.get("disc_labels")
    if disc_labels:
        disc = Discriminator.initialize(config.hidden_dim, disc_labels, int(header.get("seed", 0)))
        for name, p in disc.params.items():
            if name not in loaded:
                raise CheckpointError(f"checkpoint is missing discriminator tensor {name!r}")
            arr = loaded.pop(name)
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr

    def read_adam(prefix: str, params: dict[str, Tensor]) -> AdamState | None:
        t_key = f"{prefix}.t"
        if t_key not in loaded:
            return None
        state = AdamState.from_params(params)
        state.t = int(loaded.pop(t_key))
        for name in params:
            for moment, store in (("m", state.m), ("v", state.v)):
                key = f"{prefix}.{moment}::{name}"
                if key not in loaded:
                    raise CheckpointError(f"checkpoint is missing optimizer tensor {key!r}")
                arr = loaded.pop(key)
                if arr.shape != params[name].data.shape:
                    raise CheckpointError(f"optimizer tensor {key!r} has wrong shape {arr.shape}")
                store[name] = arr
        return state

    adam = read_adam("adam", model.params)
    disc_adam = read_adam("dadam", disc.params) if disc is not None else None
    if loaded:
        raise CheckpointError(f"checkpoint holds unknown tensor {sorted(loaded)[0]!r}")
    return LoadedCheckpoint(model=model, disc=disc, adam=adam, disc_adam=disc_adam, header=header)
