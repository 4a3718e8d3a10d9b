"""Scoring and analysis: token-level F1, language-pair matrices with
diagonal (same-language) and full-matrix means, a paired sign-flip
randomization test, and error-analysis dumps."""

from __future__ import annotations

import json
import multiprocessing
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import RawExample, Vocabulary
from .errors import ConfigError, DataError
from .model import QAModel, extract_answer, pack_input

_SIGN_STREAM = 0xF15AE2
_SAMPLE_STREAM = 0xEA
_CHUNK = 65536


def token_f1(prediction: Sequence[str], golds: Sequence[Sequence[str]]) -> float:
    """Token-multiset F1 of a prediction against the best-matching gold.

    Precision/recall are counted over token multisets; zero overlap scores
    zero (including the empty-prediction case).
    """
    if not golds:
        raise DataError("token_f1 needs at least one gold answer")
    best = 0.0
    pred_counts = Counter(prediction)
    n_pred = len(prediction)
    for gold in golds:
        gold_counts = Counter(gold)
        same = sum((pred_counts & gold_counts).values())
        if same == 0:
            continue
        precision = same / n_pred
        recall = same / len(gold)
        best = max(best, 2.0 * precision * recall / (precision + recall))
    return best


@dataclass
class EvalReport:
    """Per-example scores plus the (q_lang, c_lang) aggregation."""

    rows: list[dict]
    matrix: dict[str, dict[str, float]]
    counts: dict[str, dict[str, int]]
    xlt: float
    gxlt: float

    def to_json(self) -> dict:
        return {
            "matrix": self.matrix,
            "counts": self.counts,
            "xlt": self.xlt,
            "gxlt": self.gxlt,
        }


def matrix_means(matrix: dict[str, dict[str, float]]) -> tuple[float, float]:
    """(diagonal mean, full-matrix mean), each unweighted over present cells."""
    diag = []
    cells = []
    for q in sorted(matrix):
        for c in sorted(matrix[q]):
            cells.append(matrix[q][c])
            if q == c:
                diag.append(matrix[q][c])
    if not cells:
        raise DataError("matrix has no cells")
    gxlt = sum(cells) / len(cells)
    xlt = sum(diag) / len(diag) if diag else float("nan")
    return xlt, gxlt


def diagonal_mean(matrix: dict[str, dict[str, float]], exclude: Sequence[str] = ()) -> float:
    """Mean of same-language cells, optionally skipping some languages."""
    diag = [
        matrix[q][q]
        for q in sorted(matrix)
        if q in matrix[q] and q not in exclude
    ]
    if not diag:
        raise DataError("matrix has no diagonal cells after exclusions")
    return sum(diag) / len(diag)


def _score_example(
    model: QAModel,
    ex: RawExample,
    vocab: Vocabulary,
    doc_stride: int,
    max_answer_len: int,
) -> dict:
    """Run every window, keep the highest-scoring span, score it against gold."""
    q_ids = [vocab.id_or_unk(t) for t in ex.question]
    c_ids = [vocab.id_or_unk(t) for t in ex.context]
    windows = pack_input(q_ids, c_ids, None, model.config, doc_stride, ex.id)
    best = None
    for w in windows:
        pred = model.forward(w)
        b, e, score = extract_answer(pred, w, max_answer_len)
        if best is None or score > best[3]:
            best = (w, b, e, score)
    w, b, e, score = best
    ctx_begin = b - w.context_range[0] + w.window_start
    ctx_end = e - w.context_range[0] + w.window_start
    tokens = list(ex.context[ctx_begin : ctx_end + 1])
    f1 = token_f1(tokens, [ex.answer.text])
    return {
        "id": ex.id,
        "q_lang": ex.q_lang,
        "c_lang": ex.c_lang,
        "begin": ctx_begin,
        "end": ctx_end,
        "prediction": tokens,
        "score": score,
        "f1": f1,
    }


_WORKER_CTX: dict = {}


def _score_index(i: int) -> dict:
    ctx = _WORKER_CTX
    return _score_example(
        ctx["model"], ctx["examples"][i], ctx["vocab"], ctx["doc_stride"], ctx["max_answer_len"]
    )


def aggregate_rows(rows: Sequence[dict]) -> EvalReport:
    """Build the language-pair matrix and its means from per-example rows.

    Rows are re-sorted by example id first so the result is independent of
    input order.
    """
    ordered = sorted(rows, key=lambda r: r["id"])
    per_cell: dict[tuple[str, str], list[float]] = {}
    for row in ordered:
        per_cell.setdefault((row["q_lang"], row["c_lang"]), []).append(row["f1"])
    matrix: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for (q, c), scores in sorted(per_cell.items()):
        matrix.setdefault(q, {})[c] = sum(scores) / len(scores)
        counts.setdefault(q, {})[c] = len(scores)
    xlt, gxlt = matrix_means(matrix)
    return EvalReport(rows=ordered, matrix=matrix, counts=counts, xlt=xlt, gxlt=gxlt)


def evaluate(
    model: QAModel,
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    *,
    doc_stride: int = 16,
    max_answer_len: int = 8,
    workers: int = 0,
) -> EvalReport:
    """Score every example (best window under the stride) and aggregate.

    `workers` > 1 forks that many scoring processes; results are identical
    to the sequential path since examples are scored independently.
    """
    if not examples:
        raise DataError("evaluation set is empty")
    if workers > 1 and len(examples) > 1 and "fork" in multiprocessing.get_all_start_methods():
        _WORKER_CTX.update(
            model=model,
            examples=list(examples),
            vocab=vocab,
            doc_stride=doc_stride,
            max_answer_len=max_answer_len,
        )
        try:
            n_procs = min(workers, len(examples))
            with multiprocessing.get_context("fork").Pool(n_procs) as pool:
                chunk = max(1, len(examples) // (4 * n_procs))
                rows = pool.map(_score_index, range(len(examples)), chunksize=chunk)
        finally:
            _WORKER_CTX.clear()
    else:
        rows = [
            _score_example(model, ex, vocab, doc_stride, max_answer_len) for ex in examples
        ]
    return aggregate_rows(rows)


@dataclass
class SignificanceResult:
    statistic: float  # observed mean(a - b)
    p_value: float
    permutations: int  # sign patterns actually evaluated
    seed: int
    exact: bool

    def to_json(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "permutations": self.permutations,
            "seed": self.seed,
            "exact": self.exact,
        }


def fisher_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    permutations: int = 10000,
    seed: int = 0,
) -> SignificanceResult:
    """Paired sign-flip randomization test on per-example score differences.

    Two-sided: p = (1 + #{|perm stat| >= |observed|}) / (1 + patterns).
    When 2^n fits under the permutation budget the sign patterns are
    enumerated exhaustively; otherwise they are drawn from a seeded stream.
    """
    a = np.asarray(list(scores_a), dtype=np.float64)
    b = np.asarray(list(scores_b), dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"paired score lists differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise DataError("paired score lists are empty")
    if permutations < 1000:
        raise ConfigError(f"permutations must be at least 1000, got {permutations}")
    diffs = a - b
    n = diffs.size
    observed = float(np.mean(diffs))
    threshold = abs(observed) - 1e-12  # guards the identity pattern against roundoff

    exact = n < 64 and 2**n <= permutations
    count = 0
    if exact:
        total = 2**n
        positions = np.arange(n, dtype=np.uint64)
        for lo in range(0, total, _CHUNK):
            block = np.arange(lo, min(lo + _CHUNK, total), dtype=np.uint64)
            # Cast to float BEFORE mapping {0,1} -> {-1,+1}: in uint64 the
            # subtraction wraps to 2**64 - 1 and poisons every statistic.
            signs = ((block[:, None] >> positions) & 1).astype(np.float64) * 2.0 - 1.0
            stats = signs @ diffs / n
            count += int(np.sum(np.abs(stats) >= threshold))
    else:
        total = permutations
        rng = np.random.default_rng([seed, _SIGN_STREAM])
        remaining = permutations
        while remaining > 0:
            m = min(remaining, _CHUNK)
            signs = rng.integers(0, 2, size=(m, n)).astype(np.float64) * 2 - 1
            stats = signs @ diffs / n
            count += int(np.sum(np.abs(stats) >= threshold))
            remaining -= m
    return SignificanceResult(
        statistic=observed,
        p_value=(1 + count) / (1 + total),
        permutations=total,
        seed=seed,
        exact=exact,
    )


def error_analysis(
    model_a: QAModel,
    model_b: QAModel,
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    k: int,
    *,
    seed: int = 0,
    doc_stride: int = 16,
    max_answer_len: int = 8,
) -> list[dict]:
    """Up to k seeded-sampled examples where model B outscores model A.

    Each entry carries the question, context, gold span, and both models'
    predictions with their F1 scores.
    """
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    qualifying = []
    for ex in examples:
        ra = _score_example(model_a, ex, vocab, doc_stride, max_answer_len)
        rb = _score_example(model_b, ex, vocab, doc_stride, max_answer_len)
        if rb["f1"] > ra["f1"]:
            qualifying.append(
                {
                    "id": ex.id,
                    "q_lang": ex.q_lang,
                    "c_lang": ex.c_lang,
                    "question": list(ex.question),
                    "context": list(ex.context),
                    "gold": {
                        "begin": ex.answer.begin,
                        "end": ex.answer.end,
                        "text": list(ex.answer.text),
                    },
                    "model_a": {k2: ra[k2] for k2 in ("begin", "end", "prediction", "score", "f1")},
                    "model_b": {k2: rb[k2] for k2 in ("begin", "end", "prediction", "score", "f1")},
                }
            )
    if len(qualifying) > k:
        rng = np.random.default_rng([seed, _SAMPLE_STREAM])
        keep = sorted(rng.choice(len(qualifying), size=k, replace=False).tolist())
        qualifying = [qualifying[i] for i in keep]
    return qualifying


def write_json_lines(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_json_lines(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: malformed JSON line: {err}") from None
    return out
