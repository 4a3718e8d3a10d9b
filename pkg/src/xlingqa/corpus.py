"""Synthetic multilingual QA corpus: vocabulary, pseudo-languages, examples.

A world holds one shared vocabulary partitioned into an English content
block plus one disjoint block per synthetic language. Each language is a
content-token bijection into its block, a deterministic reorder rule, an
optional token-expansion table (one token becomes two), and a tag-safety
probability used by the translator. Examples are templated facts
("subject relation object .") with questions that interrogate exactly one
fact and answers that are spans of the context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
UNK_ID = 3
ANS_OPEN_ID = 4
ANS_CLOSE_ID = 5

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
ANS_OPEN_TOKEN = "[ANS_OPEN]"
ANS_CLOSE_TOKEN = "[ANS_CLOSE]"

SPECIAL_TOKENS = (CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN, ANS_OPEN_TOKEN, ANS_CLOSE_TOKEN)

INTERROGATIVES = ("what", "who", "when", "where", "why", "how", "which")
OTHER_STARTERS = ("name", "state", "tell", "give", "list")
QUESTION_TYPES = INTERROGATIVES + ("other",)

# Question-type sampling weights, one entry per QUESTION_TYPES member.
TYPE_WEIGHTS = {
    "what": 0.4282,
    "who": 0.0955,
    "when": 0.0618,
    "where": 0.0372,
    "why": 0.0136,
    "how": 0.0923,
    "which": 0.0473,
    "other": 0.2241,
}

REORDER_RULES = ("identity", "reverse-within-sentence", "swap-adjacent-pairs")

DEFAULT_LANGUAGE_CODES = ("de", "es", "ar", "hi", "zh")

_PARTICLES_PER_LANGUAGE = 4
_DELIMITER = "."
# Fraction of the entity-name pool reserved for shared proper names that
# spell identically in every language (like names and numbers do).
_UNIVERSAL_SHARE = 0.33

_SYLLABLES = [
    c + v for c in "bdfgklmnprstvz" for v in ("a", "e", "i", "o", "u")
]


@dataclass
class Vocabulary:
    """Shared token table: strings, ids, and a language tag per token."""

    tokens: list[str]
    lang_tags: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.lang_tags):
            raise ConfigError("token list and tag list lengths differ")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate token strings in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise DataError(f"token {token!r} is not in the vocabulary") from None

    def id_or_unk(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise DataError(f"token id {token_id} out of range (vocab {len(self.tokens)})")
        return self.tokens[token_id]


@dataclass
class SyntheticLanguage:
    """One pseudo-language: bijection, reorder rule, expansions, tag safety."""

    lang_id: str
    mapping: dict[int, int]  # english token id -> this language's token id
    reorder: str
    expansion: dict[int, tuple[int, int]]  # english id -> (image id, particle id)
    tag_safety: float
    inverse: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.reorder not in REORDER_RULES:
            raise ConfigError(f"unknown reorder rule {self.reorder!r}")
        if not 0.0 <= self.tag_safety <= 1.0:
            raise ConfigError(f"tag_safety {self.tag_safety} outside [0, 1]")
        self.inverse = {v: k for k, v in self.mapping.items()}
        if len(self.inverse) != len(self.mapping):
            raise ConfigError(f"language {self.lang_id}: mapping is not injective")


@dataclass(frozen=True)
class Answer:
    begin: int
    end: int  # inclusive
    text: tuple[str, ...]


@dataclass(frozen=True)
class RawExample:
    id: str
    question: tuple[str, ...]
    context: tuple[str, ...]
    answer: Answer
    q_lang: str
    c_lang: str


@dataclass
class World:
    vocabulary: Vocabulary
    languages: list[SyntheticLanguage]
    entities: list[tuple[str, ...]]
    relations: list[str]
    seed: int
    delimiter: str = _DELIMITER

    @property
    def codes(self) -> list[str]:
        return [lang.lang_id for lang in self.languages]

    def language(self, code: str) -> SyntheticLanguage:
        for lang in self.languages:
            if lang.lang_id == code:
                return lang
        raise ConfigError(f"unknown language {code!r}")


def _make_words(rng: np.random.Generator, count: int, used: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(rng.choice(_SYLLABLES) for _ in range(n))
        if w not in used:
            used.add(w)
            words.append(w)
    return words


def generate_world(
    seed: int,
    num_languages: int = 5,
    vocab_size: int = 2048,
    tag_safety: float = 1.0,
) -> World:
    """Build a deterministic world from a seed.

    The vocabulary is cut into equal content blocks: one for English, one
    per language, plus a few per-language particle tokens used by token
    expansion. Requires vocab_size >= 64 * (num_languages + 1).
    """
    if num_languages < 1:
        raise ConfigError("need at least one synthetic language")
    if vocab_size < 64 * (num_languages + 1):
        raise ConfigError(
            f"vocab_size {vocab_size} too small for {num_languages} languages "
            f"(need at least {64 * (num_languages + 1)})"
        )
    rng = np.random.default_rng([seed, 0x57A71C])

    # Carve out a shared segment of proper-name tokens first. Like names,
    # numbers, and punctuation in natural text, these are written the same
    # way in every language: the translator passes them through unchanged,
    # so they act as cross-lingual anchors inside otherwise disjoint blocks.
    avail = vocab_size - len(SPECIAL_TOKENS) - num_languages * _PARTICLES_PER_LANGUAGE
    n_fixed = len(INTERROGATIVES) + len(OTHER_STARTERS) + 1  # + delimiter
    block0 = avail // (num_languages + 1)
    pool0 = block0 - n_fixed - max(6, block0 // 12)
    n_universal = max(8, int(pool0 * _UNIVERSAL_SHARE))

    block = (avail - n_universal) // (num_languages + 1)
    n_relations = max(6, block // 12)
    entity_pool_size = block - n_fixed - n_relations
    if entity_pool_size < 24:
        raise ConfigError("vocab_size leaves too few entity tokens per block")

    used: set[str] = set(SPECIAL_TOKENS) | set(INTERROGATIVES) | set(OTHER_STARTERS) | {_DELIMITER}
    universal_pool = [f"{w}_u" for w in _make_words(rng, n_universal, used)]
    relations = _make_words(rng, n_relations, used)
    entity_pool = _make_words(rng, entity_pool_size, used)

    english = list(INTERROGATIVES) + list(OTHER_STARTERS) + [_DELIMITER] + relations + entity_pool
    assert len(english) == block

    tokens = list(SPECIAL_TOKENS) + universal_pool + english
    tags = (
        ["special"] * len(SPECIAL_TOKENS)
        + ["shared"] * n_universal
        + ["en"] * block
    )
    shared_base = len(SPECIAL_TOKENS)
    en_base = shared_base + n_universal

    codes = list(DEFAULT_LANGUAGE_CODES[:num_languages])
    codes += [f"l{i + 1}" for i in range(len(codes), num_languages)]

    # Ids of English tokens eligible for expansion: relations and entities only.
    eligible = [en_base + len(INTERROGATIVES) + len(OTHER_STARTERS) + 1 + k
                for k in range(n_relations + entity_pool_size)]

    languages: list[SyntheticLanguage] = []
    for li, code in enumerate(codes):
        base = len(tokens)
        perm = rng.permutation(block)
        mapping = {i: i for i in range(len(SPECIAL_TOKENS))}
        # Shared proper names keep their spelling in every language.
        for uid in range(shared_base, en_base):
            mapping[uid] = uid
        images = [""] * block
        for k in range(block):
            src_id = en_base + k
            dst_slot = int(perm[k])
            mapping[src_id] = base + dst_slot
            images[dst_slot] = f"{english[k]}_{code}"
        tokens += images
        tags += [code] * block

        particle_ids = []
        for p in range(_PARTICLES_PER_LANGUAGE):
            particle_ids.append(len(tokens))
            tokens.append(f"pt{p}_{code}")
            tags.append(code)

        expansion: dict[int, tuple[int, int]] = {}
        if li % 2 == 1:
            n_exp = int(0.15 * len(eligible))
            chosen = rng.choice(len(eligible), size=n_exp, replace=False)
            for c in sorted(int(j) for j in chosen):
                src_id = eligible[c]
                particle = particle_ids[int(rng.integers(0, len(particle_ids)))]
                expansion[src_id] = (mapping[src_id], particle)

        languages.append(
            SyntheticLanguage(
                lang_id=code,
                mapping=mapping,
                reorder=REORDER_RULES[li % 3],
                expansion=expansion,
                tag_safety=tag_safety,
            )
        )

    while len(tokens) < vocab_size:
        tokens.append(f"unused{len(tokens)}")
        tags.append("none")

    vocab = Vocabulary(tokens=tokens, lang_tags=tags)

    name_pool = entity_pool + universal_pool
    n_entities = max(12, int(len(name_pool) * 0.6))
    entities: list[tuple[str, ...]] = []
    seen = set()
    while len(entities) < n_entities:
        k = int(rng.integers(1, 3))
        ent = tuple(name_pool[int(rng.integers(0, len(name_pool)))] for _ in range(k))
        if ent not in seen:
            seen.add(ent)
            entities.append(ent)

    return World(vocabulary=vocab, languages=languages, entities=entities,
                 relations=relations, seed=seed)


# Context token budget keeps packed sequences inside the desk encoder's
# 64-token window even after question-side expansion.
_CONTEXT_BUDGET = 48
_MIN_FACT_LEN = 4  # 1-token subject + relation + 1-token object + delimiter


def generate_examples(world: World, n: int, seed: int, id_prefix: str = "ex") -> list[RawExample]:
    """Generate n English QA examples deterministically from the seed."""
    if n < 0:
        raise ConfigError("example count must be non-negative")
    rng = np.random.default_rng([seed, 0xE7A3])
    types = list(TYPE_WEIGHTS)
    weights = np.array([TYPE_WEIGHTS[t] for t in types])
    weights = weights / weights.sum()
    starters = {t: (t,) for t in INTERROGATIVES}
    starters["other"] = OTHER_STARTERS

    out: list[RawExample] = []
    for i in range(n):
        num_facts = int(rng.integers(4, 11))
        facts: list[tuple[tuple[str, ...], str, tuple[str, ...]]] = []
        used_keys: set[tuple] = set()
        total = 0
        for fi in range(num_facts):
            # Reserve minimum room for the remaining facts so the context
            # always fits the budget.
            allowed = _CONTEXT_BUDGET - total - _MIN_FACT_LEN * (num_facts - 1 - fi)
            while True:
                subj = world.entities[int(rng.integers(0, len(world.entities)))]
                rel = world.relations[int(rng.integers(0, len(world.relations)))]
                obj = world.entities[int(rng.integers(0, len(world.entities)))]
                if len(subj) + 1 + len(obj) + 1 > allowed:
                    subj, obj = subj[:1], obj[:1]
                if (subj, rel) in used_keys:
                    continue
                used_keys.add((subj, rel))
                facts.append((subj, rel, obj))
                total += len(subj) + 1 + len(obj) + 1
                break

        target = int(rng.integers(0, len(facts)))
        context: list[str] = []
        answer_begin = answer_end = -1
        answer_text: tuple[str, ...] = ()
        for fi, (subj, rel, obj) in enumerate(facts):
            context.extend(subj)
            context.append(rel)
            if fi == target:
                answer_begin = len(context)
                answer_end = answer_begin + len(obj) - 1
                answer_text = obj
            context.extend(obj)
            context.append(world.delimiter)

        qtype = types[int(rng.choice(len(types), p=weights))]
        pool = starters[qtype]
        qword = pool[int(rng.integers(0, len(pool)))]
        subj, rel, _ = facts[target]
        question = (qword, rel) + subj

        out.append(
            RawExample(
                id=f"{id_prefix}-{seed % 10**8:08d}-{i:06d}",
                question=question,
                context=tuple(context),
                answer=Answer(begin=answer_begin, end=answer_end, text=answer_text),
                q_lang="en",
                c_lang="en",
            )
        )
    return out


def validate_example(ex: RawExample, where: str = "") -> None:
    """Check the structural invariants of one example."""
    loc = f"{where}: " if where else ""
    if not ex.question:
        raise DataError(f"{loc}empty question in {ex.id}")
    if not ex.context:
        raise DataError(f"{loc}empty context in {ex.id}")
    a = ex.answer
    if a.end < a.begin:
        raise DataError(f"{loc}answer end {a.end} precedes begin {a.begin} in {ex.id}")
    if a.begin < 0 or a.end >= len(ex.context):
        raise DataError(f"{loc}answer span ({a.begin}, {a.end}) outside context in {ex.id}")
    if tuple(ex.context[a.begin : a.end + 1]) != tuple(a.text):
        raise DataError(f"{loc}answer text does not match context span in {ex.id}")
    if not a.text:
        raise DataError(f"{loc}empty answer text in {ex.id}")


def shuffle_fact_order(ex: RawExample, rng: np.random.Generator) -> RawExample:
    """Return a copy of an English-context example with its facts reordered.

    Contexts are delimiter-terminated fact segments whose order carries no
    meaning, so presenting them shuffled removes absolute-position shortcuts
    during training. The answer span is re-pointed at its segment's new
    location. Examples whose context is not English are returned unchanged
    (translated contexts may reorder tokens within segments, so the English
    delimiter no longer marks boundaries).
    """
    if ex.c_lang != "en":
        return ex
    segments: list[list[str]] = []
    current: list[str] = []
    for tok in ex.context:
        current.append(tok)
        if tok == _DELIMITER:
            segments.append(current)
            current = []
    if current:
        segments.append(current)
    if len(segments) < 2:
        return ex

    offset = 0
    seg_of_answer = -1
    inner_begin = inner_end = -1
    for si, seg in enumerate(segments):
        if ex.answer.begin < offset + len(seg):
            seg_of_answer = si
            inner_begin = ex.answer.begin - offset
            inner_end = ex.answer.end - offset
            break
        offset += len(seg)
    if seg_of_answer < 0 or inner_end >= len(segments[seg_of_answer]):
        raise DataError(f"answer span crosses a fact boundary in {ex.id}")

    order = [int(i) for i in rng.permutation(len(segments))]
    new_context: list[str] = []
    new_begin = -1
    for si in order:
        if si == seg_of_answer:
            new_begin = len(new_context) + inner_begin
        new_context.extend(segments[si])
    new_ex = RawExample(
        id=ex.id,
        question=ex.question,
        context=tuple(new_context),
        answer=Answer(
            begin=new_begin,
            end=new_begin + (inner_end - inner_begin),
            text=ex.answer.text,
        ),
        q_lang=ex.q_lang,
        c_lang=ex.c_lang,
    )
    validate_example(new_ex, "shuffle_fact_order")
    return new_ex


def question_type_stats(examples: Iterable[RawExample]) -> dict[str, int]:
    """Histogram of questions keyed by first token; unknown words count as other."""
    counts = {t: 0 for t in QUESTION_TYPES}
    for ex in examples:
        first = ex.question[0] if ex.question else ""
        counts[first if first in INTERROGATIVES else "other"] += 1
    return counts


def example_to_record(ex: RawExample) -> dict:
    return {
        "id": ex.id,
        "q_lang": ex.q_lang,
        "c_lang": ex.c_lang,
        "question": list(ex.question),
        "context": list(ex.context),
        "answers": [{"text": list(ex.answer.text), "answer_start": ex.answer.begin}],
    }


def example_from_record(rec: dict, where: str) -> RawExample:
    try:
        answers = rec["answers"]
        if not isinstance(answers, list) or len(answers) != 1:
            raise DataError(f"{where}: expected exactly one answer, got {len(answers) if isinstance(answers, list) else type(answers).__name__}")
        ans = answers[0]
        text = tuple(str(t) for t in ans["text"])
        begin = int(ans["answer_start"])
        ex = RawExample(
            id=str(rec["id"]),
            question=tuple(str(t) for t in rec["question"]),
            context=tuple(str(t) for t in rec["context"]),
            answer=Answer(begin=begin, end=begin + len(text) - 1, text=text),
            q_lang=str(rec["q_lang"]),
            c_lang=str(rec["c_lang"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"{where}: malformed record ({err})") from None
    validate_example(ex, where)
    return ex


def write_jsonl(examples: Iterable[RawExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[RawExample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{where}: malformed JSON ({err.msg})") from None
            out.append(example_from_record(rec, where))
    return out


def world_to_record(world: World) -> dict:
    """JSON-ready description of a world, exact enough to rebuild it."""
    return {
        "seed": world.seed,
        "delimiter": world.delimiter,
        "tokens": list(world.vocabulary.tokens),
        "lang_tags": list(world.vocabulary.lang_tags),
        "entities": [list(e) for e in world.entities],
        "relations": list(world.relations),
        "languages": [
            {
                "code": lang.lang_id,
                "reorder": lang.reorder,
                "tag_safety": lang.tag_safety,
                "mapping": sorted(lang.mapping.items()),
                "expansion": sorted((k, list(v)) for k, v in lang.expansion.items()),
            }
            for lang in world.languages
        ],
    }


def world_from_record(rec: dict, where: str = "world") -> World:
    try:
        vocab = Vocabulary(
            tokens=[str(t) for t in rec["tokens"]],
            lang_tags=[str(t) for t in rec["lang_tags"]],
        )
        languages = [
            SyntheticLanguage(
                lang_id=str(l["code"]),
                mapping={int(k): int(v) for k, v in l["mapping"]},
                reorder=str(l["reorder"]),
                expansion={int(k): (int(v[0]), int(v[1])) for k, v in l["expansion"]},
                tag_safety=float(l["tag_safety"]),
            )
            for l in rec["languages"]
        ]
        return World(
            vocabulary=vocab,
            languages=languages,
            entities=[tuple(str(t) for t in e) for e in rec["entities"]],
            relations=[str(r) for r in rec["relations"]],
            seed=int(rec["seed"]),
            delimiter=str(rec["delimiter"]),
        )
    except (KeyError, TypeError, ValueError, IndexError) as err:
        raise DataError(f"{where}: malformed world record ({err})") from None


def write_world(world: World, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world_to_record(world), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_world(path) -> World:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            rec = json.load(fh)
        except json.JSONDecodeError as err:
            raise DataError(f"{path}: malformed world JSON ({err.msg})") from None
    return world_from_record(rec, where=str(path))
