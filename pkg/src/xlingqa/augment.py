"""Translation-based data augmentation over the synthetic world.

The translator applies, per sentence: the language's reorder rule, then the
content-token bijection with optional one-to-two expansions. Answer spans
survive context translation by wrapping them in tag tokens that travel as
one atomic unit; alignment fails (and the example is dropped) whenever the
tags come back mangled, which happens with probability 1 - tag_safety.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .corpus import (
    ANS_CLOSE_ID,
    ANS_CLOSE_TOKEN,
    ANS_OPEN_ID,
    ANS_OPEN_TOKEN,
    INTERROGATIVES,
    QUESTION_TYPES,
    RawExample,
    Answer,
    World,
)
from .errors import ConfigError, DataError

_N_SPECIALS = 6


class Translator(Protocol):
    def supports(self, lang: str) -> bool: ...

    def translate(self, tokens: Sequence[str], target_lang: str, seed: int) -> list[str]: ...


def _stable_uniform(*parts) -> float:
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


class _Region(tuple):
    """Marker wrapper holding the token ids inside an answer tag pair."""


class SyntheticTranslator:
    """Deterministic pseudo-translation driven by the world's language tables."""

    def __init__(self, world: World):
        self.world = world
        self.vocab = world.vocabulary
        self._delims = {
            lang.lang_id: world.vocabulary.id(world.delimiter) for lang in world.languages
        }

    def supports(self, lang: str) -> bool:
        return any(l.lang_id == lang for l in self.world.languages)

    def translate(self, tokens: Sequence[str], target_lang: str, seed: int) -> list[str]:
        lang = self.world.language(target_lang)
        ids = [self.vocab.id(t) for t in tokens]
        en_delim = self.vocab.id(self.world.delimiter)

        opens = [i for i, t in enumerate(ids) if t == ANS_OPEN_ID]
        closes = [i for i, t in enumerate(ids) if t == ANS_CLOSE_ID]
        atoms: list[object]
        if len(opens) == 1 and len(closes) == 1 and opens[0] < closes[0]:
            o, c = opens[0], closes[0]
            atoms = list(ids[:o]) + [_Region(ids[o + 1 : c])] + list(ids[c + 1 :])
        else:
            atoms = list(ids)

        out = self._translate_atoms(atoms, lang, en_delim)

        if lang.tag_safety < 1.0 and ANS_OPEN_ID in out:
            draw = _stable_uniform("tags", seed, target_lang, tuple(ids))
            if draw >= lang.tag_safety:
                out = self._mangle_tags(out, seed, target_lang, tuple(ids))
        return [self.vocab.token(i) for i in out]

    def _translate_atoms(self, atoms: list, lang, en_delim: int) -> list[int]:
        # Split into sentences on the English delimiter, reorder each
        # sentence (the delimiter stays put at its end), then map tokens.
        sentences: list[list] = [[]]
        for a in atoms:
            sentences[-1].append(a)
            if a == en_delim:
                sentences.append([])
        if not sentences[-1]:
            sentences.pop()

        ordered: list = []
        for sent in sentences:
            has_delim = bool(sent) and sent[-1] == en_delim
            body = sent[:-1] if has_delim else sent
            body = _reorder(body, lang.reorder)
            ordered.extend(body)
            if has_delim:
                ordered.append(sent[-1])

        out: list[int] = []
        for a in ordered:
            if isinstance(a, _Region):
                out.append(ANS_OPEN_ID)
                out.extend(self._translate_atoms(list(a), lang, en_delim))
                out.append(ANS_CLOSE_ID)
            elif a < _N_SPECIALS:
                out.append(a)
            elif a in lang.expansion:
                image, particle = lang.expansion[a]
                out.extend((image, particle))
            else:
                try:
                    out.append(lang.mapping[a])
                except KeyError:
                    raise DataError(
                        f"token {self.vocab.token(a)!r} has no image in language {lang.lang_id}"
                    ) from None
        return out

    @staticmethod
    def _mangle_tags(out: list[int], seed: int, lang: str, key: tuple) -> list[int]:
        """Simulate translation damaging the answer tags.

        Every mode removes or disorders tags so alignment detects the
        failure; none of them can silently produce a wrong span.
        """
        mode = int(_stable_uniform("mangle", seed, lang, key) * 4)
        o = out.index(ANS_OPEN_ID)
        c = out.index(ANS_CLOSE_ID)
        if mode == 0:  # drop the opening tag
            return out[:o] + out[o + 1 :]
        if mode == 1:  # drop the closing tag
            return out[:c] + out[c + 1 :]
        if mode == 2:  # drop both
            return [t for i, t in enumerate(out) if i not in (o, c)]
        # swap the pair out of order
        swapped = list(out)
        swapped[o], swapped[c] = swapped[c], swapped[o]
        return swapped


def _reorder(body: list, rule: str) -> list:
    if rule == "identity":
        return list(body)
    if rule == "reverse-within-sentence":
        return list(reversed(body))
    if rule == "swap-adjacent-pairs":
        out = list(body)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ConfigError(f"unknown reorder rule {rule!r}")


class IdentityTranslator:
    """Pass-through translator for tests and ablations."""

    def supports(self, lang: str) -> bool:
        return True

    def translate(self, tokens: Sequence[str], target_lang: str, seed: int) -> list[str]:
        return list(tokens)


def align_answer(
    context: Sequence[str],
    span: tuple[int, int],
    translator: Translator,
    lang: str,
    seed: int,
) -> tuple[tuple[str, ...], tuple[int, int]] | None:
    """Translate a context while tracking its answer span via tag tokens.

    Returns (translated context, new inclusive span), or None when the tags
    do not survive translation as exactly one ordered, non-empty pair.
    Failures are always detected; a mangled result never yields a span.
    """
    b, e = span
    if not (0 <= b <= e < len(context)):
        raise ValueError(f"span ({b}, {e}) outside context of {len(context)} tokens")
    tagged = list(context[:b]) + [ANS_OPEN_TOKEN] + list(context[b : e + 1]) + [ANS_CLOSE_TOKEN] + list(context[e + 1 :])
    out = translator.translate(tagged, lang, seed)
    opens = [i for i, t in enumerate(out) if t == ANS_OPEN_TOKEN]
    closes = [i for i, t in enumerate(out) if t == ANS_CLOSE_TOKEN]
    if len(opens) != 1 or len(closes) != 1:
        return None
    o, c = opens[0], closes[0]
    if c <= o + 1:  # out of order or empty span
        return None
    stripped = tuple(out[:o] + out[o + 1 : c] + out[c + 1 :])
    return stripped, (o, c - 2)


@dataclass
class CorpusStats:
    total_pairs: int
    avg_question_tokens: float
    avg_answer_tokens: float
    question_types: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "total_pairs": self.total_pairs,
            "avg_question_tokens": self.avg_question_tokens,
            "avg_answer_tokens": self.avg_answer_tokens,
            "question_types": dict(self.question_types),
        }


def corpus_stats(examples: Sequence[RawExample]) -> CorpusStats:
    """Token-count averages and a first-word question-type histogram."""
    counts = {t: 0 for t in QUESTION_TYPES}
    q_total = a_total = 0
    for ex in examples:
        first = ex.question[0] if ex.question else ""
        counts[first if first in INTERROGATIVES else "other"] += 1
        q_total += len(ex.question)
        a_total += len(ex.answer.text)
    n = len(examples)
    return CorpusStats(
        total_pairs=n,
        avg_question_tokens=q_total / n if n else 0.0,
        avg_answer_tokens=a_total / n if n else 0.0,
        question_types=counts,
    )


@dataclass
class AugmentedDataset:
    strategy: str
    examples: list[RawExample]
    kept: dict[str, int]
    failed: dict[str, int]

    @property
    def base_size(self) -> int:
        return self.kept.get("en", 0)

    def sidecar(self) -> dict:
        return {
            "strategy": self.strategy,
            "kept": dict(self.kept),
            "failed": dict(self.failed),
            "stats": corpus_stats(self.examples).to_dict(),
        }


def _check_base(base: Sequence[RawExample]) -> None:
    if not base:
        raise DataError("empty base dataset")
    for ex in base:
        if ex.q_lang != "en" or ex.c_lang != "en":
            raise DataError(f"base example {ex.id} is not English/English")
        if "::" in ex.id:
            raise DataError(f"base example id {ex.id!r} uses the reserved '::' marker")


def _check_translator(translator: Translator, codes: Sequence[str]) -> None:
    for code in codes:
        if not translator.supports(code):
            raise ConfigError(f"translator does not support language {code!r}")


def translate_q_size(base_size: int, num_languages: int) -> int:
    """Size of a failure-free question-translation dataset."""
    return base_size * (1 + num_languages)


def translate_all_size(tq_size: int, tc_size: int, tqc_size: int, base_size: int) -> int:
    """Size of the union dataset: the shared English base counts once."""
    return tq_size + tc_size + tqc_size - 2 * base_size


def build_translate_q(
    base: Sequence[RawExample], world: World, translator: Translator, seed: int
) -> AugmentedDataset:
    """English base plus one question-translated copy per language.

    Contexts and answers are untouched; nothing can fail alignment.
    """
    _check_base(base)
    codes = world.codes
    _check_translator(translator, codes)
    examples = list(base)
    kept = {"en": len(base)}
    failed = {"en": 0}
    for lang in codes:
        n = 0
        for ex in base:
            q2 = tuple(translator.translate(ex.question, lang, seed))
            examples.append(
                RawExample(
                    id=f"{ex.id}::tq-{lang}",
                    question=q2,
                    context=ex.context,
                    answer=ex.answer,
                    q_lang=lang,
                    c_lang=ex.c_lang,
                )
            )
            n += 1
        kept[lang] = n
        failed[lang] = 0
    return AugmentedDataset("tq", examples, kept, failed)


def build_translate_c(
    base: Sequence[RawExample], world: World, translator: Translator, seed: int
) -> AugmentedDataset:
    """English base plus context-translated copies; misaligned answers drop."""
    _check_base(base)
    codes = world.codes
    _check_translator(translator, codes)
    examples = list(base)
    kept = {"en": len(base)}
    failed = {"en": 0}
    for lang in codes:
        n_kept = n_failed = 0
        for ex in base:
            res = align_answer(ex.context, (ex.answer.begin, ex.answer.end), translator, lang, seed)
            if res is None:
                n_failed += 1
                continue
            ctx, (b, e) = res
            examples.append(
                RawExample(
                    id=f"{ex.id}::tc-{lang}",
                    question=ex.question,
                    context=ctx,
                    answer=Answer(begin=b, end=e, text=tuple(ctx[b : e + 1])),
                    q_lang=ex.q_lang,
                    c_lang=lang,
                )
            )
            n_kept += 1
        kept[lang] = n_kept
        failed[lang] = n_failed
    return AugmentedDataset("tc", examples, kept, failed)


def build_translate_qc(
    base: Sequence[RawExample], world: World, translator: Translator, seed: int
) -> AugmentedDataset:
    """Both sides translated into the same language; alignment as for tc."""
    _check_base(base)
    codes = world.codes
    _check_translator(translator, codes)
    examples = list(base)
    kept = {"en": len(base)}
    failed = {"en": 0}
    for lang in codes:
        n_kept = n_failed = 0
        for ex in base:
            res = align_answer(ex.context, (ex.answer.begin, ex.answer.end), translator, lang, seed)
            if res is None:
                n_failed += 1
                continue
            ctx, (b, e) = res
            q2 = tuple(translator.translate(ex.question, lang, seed))
            examples.append(
                RawExample(
                    id=f"{ex.id}::tqc-{lang}",
                    question=q2,
                    context=ctx,
                    answer=Answer(begin=b, end=e, text=tuple(ctx[b : e + 1])),
                    q_lang=lang,
                    c_lang=lang,
                )
            )
            n_kept += 1
        kept[lang] = n_kept
        failed[lang] = n_failed
    return AugmentedDataset("tqc", examples, kept, failed)


def _split_base(ds: AugmentedDataset) -> tuple[list[RawExample], list[RawExample]]:
    base = [ex for ex in ds.examples if "::" not in ex.id]
    rest = [ex for ex in ds.examples if "::" in ex.id]
    return base, rest


def build_translate_all(
    tq: AugmentedDataset, tc: AugmentedDataset, tqc: AugmentedDataset
) -> AugmentedDataset:
    """Union of the three strategies with the shared English base kept once."""
    for ds, want in ((tq, "tq"), (tc, "tc"), (tqc, "tqc")):
        if ds.strategy != want:
            raise DataError(f"expected a {want!r} dataset, got {ds.strategy!r}")
    base_q, rest_q = _split_base(tq)
    base_c, rest_c = _split_base(tc)
    base_qc, rest_qc = _split_base(tqc)
    ids_q = {ex.id for ex in base_q}
    if ids_q != {ex.id for ex in base_c} or ids_q != {ex.id for ex in base_qc}:
        raise DataError("the three datasets were not built from the same base")

    examples = base_q + rest_q + rest_c + rest_qc
    expected = translate_all_size(
        len(tq.examples), len(tc.examples), len(tqc.examples), len(base_q)
    )
    if len(examples) != expected:
        raise DataError(f"union size {len(examples)} does not match expected {expected}")

    langs = set(tq.kept) | set(tc.kept) | set(tqc.kept)
    kept = {"en": len(base_q)}
    failed = {"en": 0}
    for lang in sorted(langs - {"en"}):
        kept[lang] = tq.kept.get(lang, 0) + tc.kept.get(lang, 0) + tqc.kept.get(lang, 0)
        failed[lang] = tq.failed.get(lang, 0) + tc.failed.get(lang, 0) + tqc.failed.get(lang, 0)
    return AugmentedDataset("tall", examples, kept, failed)


BUILDERS = {
    "tq": build_translate_q,
    "tc": build_translate_c,
    "tqc": build_translate_qc,
}
