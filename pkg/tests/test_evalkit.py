"""Unit tests for scoring: token F1, matrix aggregation, the paired
sign-flip randomization test, error analysis, and JSON-lines IO."""

import itertools
import json
import math

import numpy as np
import pytest

from xlingqa.corpus import generate_examples, generate_world
from xlingqa.errors import ConfigError, DataError
from xlingqa.evalkit import (
    aggregate_rows,
    diagonal_mean,
    error_analysis,
    evaluate,
    fisher_test,
    matrix_means,
    read_json_lines,
    token_f1,
    write_json_lines,
)
from xlingqa.model import EncoderConfig, QAModel
from xlingqa.pipeline import build_eval_matrix

# --- token-level F1 -----------------------------------------------------------


def test_exact_match_scores_one():
    assert token_f1(["alpha", "beta"], [["alpha", "beta"]]) == 1.0


def test_disjoint_tokens_score_zero():
    assert token_f1(["alpha"], [["beta", "gamma"]]) == 0.0


def test_half_overlap_scores_half():
    # precision 1/2, recall 1/2 -> F1 1/2
    assert token_f1(["a", "b"], [["b", "c"]]) == pytest.approx(0.5)


def test_duplicate_tokens_count_as_multiset():
    # overlap 1, precision 1/2, recall 1 -> F1 2/3
    assert token_f1(["a", "a"], [["a"]]) == pytest.approx(2.0 / 3.0)


def test_best_matching_gold_wins():
    golds = [["x", "y"], ["a", "b"], ["a"]]
    assert token_f1(["a", "b"], golds) == 1.0
    # with only partial golds, the highest-F1 one is chosen
    assert token_f1(["a", "b"], [["x"], ["a", "z", "w"]]) == pytest.approx(2.0 / 5.0)


def test_empty_prediction_and_empty_gold_score_zero():
    assert token_f1([], [["a"]]) == 0.0
    assert token_f1(["a"], [[]]) == 0.0
    assert token_f1([], [[]]) == 0.0


def test_no_golds_is_an_error():
    with pytest.raises(DataError, match="at least one gold"):
        token_f1(["a"], [])


def test_f1_matches_counting_oracle_and_is_symmetric():
    """Exhaustive sweep of all token lists up to length 3 over a 3-letter
    alphabet, against the simplified form 2*overlap / (len_p + len_g)."""

    def oracle(pred, gold):
        overlap = sum(min(pred.count(t), gold.count(t)) for t in set(pred) | set(gold))
        if overlap == 0:
            return 0.0
        return 2.0 * overlap / (len(pred) + len(gold))

    alphabet = ("a", "b", "c")
    lists = [
        list(combo)
        for n in range(4)
        for combo in itertools.product(alphabet, repeat=n)
    ]
    assert len(lists) == 40
    for pred in lists:
        for gold in lists:
            got = token_f1(pred, [gold])
            assert got == pytest.approx(oracle(pred, gold), rel=1e-12, abs=1e-15)
            assert got == pytest.approx(token_f1(gold, [pred]), rel=1e-12, abs=1e-15)
            assert 0.0 <= got <= 1.0


# --- matrix aggregation -------------------------------------------------------

# Hand-checked aggregation fixture: a seven-language F1 matrix whose row,
# column, diagonal, and full means are all known, so any transcription slip
# breaks at least one of the cross-checks below.
REFERENCE_MATRIX = {
    "ar": {"ar": 58.0, "de": 59.7, "en": 70.3, "es": 62.7, "hi": 51.1, "vi": 61.6, "zh": 54.0},
    "de": {"ar": 58.6, "de": 65.5, "en": 78.0, "es": 71.0, "hi": 59.0, "vi": 66.2, "zh": 59.9},
    "en": {"ar": 56.8, "de": 64.9, "en": 80.2, "es": 69.6, "hi": 56.6, "vi": 66.6, "zh": 59.6},
    "es": {"ar": 55.8, "de": 66.0, "en": 77.7, "es": 70.2, "hi": 55.3, "vi": 64.5, "zh": 58.2},
    "hi": {"ar": 50.5, "de": 57.1, "en": 70.3, "es": 61.5, "hi": 58.9, "vi": 60.7, "zh": 54.0},
    "vi": {"ar": 49.3, "de": 56.7, "en": 69.0, "es": 61.4, "hi": 50.8, "vi": 64.0, "zh": 54.7},
    "zh": {"ar": 54.3, "de": 60.9, "en": 74.3, "es": 66.0, "hi": 52.4, "vi": 66.3, "zh": 63.1},
}
REFERENCE_ROW_MEANS = {"ar": 59.6, "de": 65.5, "en": 64.9, "es": 64.0, "hi": 59.0, "vi": 58.0, "zh": 62.5}
REFERENCE_COL_MEANS = {"ar": 54.8, "de": 61.5, "en": 74.3, "es": 66.1, "hi": 54.9, "vi": 64.3, "zh": 57.6}


def test_reference_matrix_means():
    xlt, gxlt = matrix_means(REFERENCE_MATRIX)
    assert xlt == pytest.approx(65.7, abs=0.05)
    assert gxlt == pytest.approx(61.9, abs=0.05)
    assert round(xlt, 1) == 65.7
    assert round(gxlt, 1) == 61.9


def test_reference_matrix_row_and_column_means():
    langs = sorted(REFERENCE_MATRIX)
    for q in langs:
        row = [REFERENCE_MATRIX[q][c] for c in langs]
        assert round(sum(row) / len(row), 1) == REFERENCE_ROW_MEANS[q]
    for c in langs:
        col = [REFERENCE_MATRIX[q][c] for q in langs]
        assert round(sum(col) / len(col), 1) == REFERENCE_COL_MEANS[c]


def test_diagonal_mean_matches_same_language_cells():
    xlt, _ = matrix_means(REFERENCE_MATRIX)
    assert diagonal_mean(REFERENCE_MATRIX) == pytest.approx(xlt, rel=1e-12)
    sans_en = [REFERENCE_MATRIX[q][q] for q in sorted(REFERENCE_MATRIX) if q != "en"]
    assert diagonal_mean(REFERENCE_MATRIX, exclude=("en",)) == pytest.approx(
        sum(sans_en) / 6, rel=1e-12
    )
    with pytest.raises(DataError, match="no diagonal cells"):
        diagonal_mean(REFERENCE_MATRIX, exclude=tuple(REFERENCE_MATRIX))


def test_matrix_means_edge_cases():
    with pytest.raises(DataError, match="no cells"):
        matrix_means({})
    xlt, gxlt = matrix_means({"en": {"de": 3.0}})
    assert math.isnan(xlt)
    assert gxlt == 3.0


def test_aggregate_rows_hand_fixture():
    rows = [
        {"id": "r3", "q_lang": "en", "c_lang": "de", "f1": 1.0},
        {"id": "r1", "q_lang": "en", "c_lang": "en", "f1": 0.4},
        {"id": "r2", "q_lang": "en", "c_lang": "en", "f1": 0.8},
    ]
    report = aggregate_rows(rows)
    assert report.matrix == {"en": {"de": 1.0, "en": pytest.approx(0.6)}}
    assert report.counts == {"en": {"de": 1, "en": 2}}
    assert report.xlt == pytest.approx(0.6)
    assert report.gxlt == pytest.approx(0.8)
    assert [r["id"] for r in report.rows] == ["r1", "r2", "r3"]
    payload = report.to_json()
    assert sorted(payload) == ["counts", "gxlt", "matrix", "xlt"]
    json.dumps(payload)  # must be serializable as-is


def test_aggregate_rows_is_order_invariant():
    rng = np.random.default_rng(5)
    rows = [
        {"id": f"e{i:03d}", "q_lang": q, "c_lang": c, "f1": float(rng.uniform())}
        for i, (q, c) in enumerate(itertools.product(("en", "de", "es"), repeat=2))
    ]
    shuffled = list(rows)
    rng.shuffle(shuffled)
    a = aggregate_rows(rows)
    b = aggregate_rows(shuffled)
    assert a.matrix == b.matrix
    assert a.counts == b.counts
    assert a.rows == b.rows


# --- end-to-end evaluation ----------------------------------------------------


@pytest.fixture(scope="module")
def eval_world():
    return generate_world(7, num_languages=2, vocab_size=256)


@pytest.fixture(scope="module")
def eval_rows(eval_world):
    base = generate_examples(eval_world, 12, 7, id_prefix="tiny")
    cells = [(q, c) for q in ("en", "de", "es") for c in ("en", "de", "es")]
    return build_eval_matrix(eval_world, base, cells, seed=0)


def _eval_model(seed):
    cfg = EncoderConfig(
        num_layers=1,
        num_heads=2,
        hidden_dim=16,
        ff_dim=32,
        vocab_size=256,
        max_seq_len=64,
        dropout_rate=0.0,
        seed=seed,
    )
    return QAModel.initialize(cfg, ["en", "de", "es"])


@pytest.fixture(scope="module")
def eval_model():
    return _eval_model(3)


@pytest.fixture(scope="module")
def eval_report(eval_model, eval_rows, eval_world):
    return evaluate(eval_model, eval_rows, eval_world.vocabulary)


def test_report_covers_every_language_pair(eval_report, eval_rows):
    langs = ("de", "en", "es")
    assert sorted(eval_report.matrix) == list(langs)
    for q in langs:
        assert sorted(eval_report.matrix[q]) == list(langs)
        for c in langs:
            assert eval_report.counts[q][c] == 12
    assert len(eval_report.rows) == len(eval_rows) == 108


def test_report_rows_describe_context_spans(eval_report, eval_rows):
    by_id = {ex.id: ex for ex in eval_rows}
    for row in eval_report.rows:
        ex = by_id[row["id"]]
        assert row["q_lang"] == ex.q_lang and row["c_lang"] == ex.c_lang
        assert 0 <= row["begin"] <= row["end"] < len(ex.context)
        assert row["end"] - row["begin"] + 1 <= 8  # default answer-length cap
        assert row["prediction"] == list(ex.context[row["begin"] : row["end"] + 1])
        assert 0.0 <= row["f1"] <= 1.0
        assert isinstance(row["score"], float)


def test_report_rows_are_sorted_and_deterministic(eval_report, eval_model, eval_rows, eval_world):
    ids = [r["id"] for r in eval_report.rows]
    assert ids == sorted(ids)
    again = evaluate(eval_model, eval_rows, eval_world.vocabulary)
    assert again.rows == eval_report.rows
    assert again.matrix == eval_report.matrix


def test_parallel_scoring_matches_sequential(eval_report, eval_model, eval_rows, eval_world):
    parallel = evaluate(eval_model, eval_rows, eval_world.vocabulary, workers=2)
    assert parallel.rows == eval_report.rows
    assert parallel.matrix == eval_report.matrix
    assert parallel.counts == eval_report.counts


def test_report_means_match_matrix(eval_report):
    cells = [eval_report.matrix[q][c] for q in eval_report.matrix for c in eval_report.matrix[q]]
    diag = [eval_report.matrix[q][q] for q in eval_report.matrix if q in eval_report.matrix[q]]
    assert eval_report.gxlt == pytest.approx(sum(cells) / len(cells), rel=1e-12)
    assert eval_report.xlt == pytest.approx(sum(diag) / len(diag), rel=1e-12)


def test_evaluating_nothing_is_an_error(eval_model, eval_world):
    with pytest.raises(DataError, match="empty"):
        evaluate(eval_model, [], eval_world.vocabulary)


# --- paired sign-flip randomization test --------------------------------------


def test_identical_scores_are_never_significant():
    scores = [0.3, 0.7, 0.1, 0.9, 0.5]
    result = fisher_test(scores, scores)
    assert result.p_value == 1.0
    assert result.statistic == 0.0
    assert result.exact is True


def test_four_unit_differences_enumerate_to_three_seventeenths():
    # only the two all-same-sign patterns reach |mean| = 1, so
    # p = (1 + 2) / (1 + 16)
    result = fisher_test([1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0])
    assert result.p_value == pytest.approx(3.0 / 17.0, rel=1e-12)
    assert result.exact is True
    assert result.permutations == 16


def test_exact_branch_matches_brute_force_enumeration():
    """Regression guard: sign patterns must be mapped to {-1, +1} in float;
    an unsigned-integer mapping silently wraps 0 -> 2**64 - 1 and inflates
    every p-value to 1.0."""
    rng = np.random.default_rng(42)
    a = rng.uniform(0, 1, 8)
    b = rng.uniform(0, 1, 8)
    result = fisher_test(a.tolist(), b.tolist())
    diffs = a - b
    threshold = abs(diffs.mean()) - 1e-12
    count = sum(
        1
        for signs in itertools.product((-1.0, 1.0), repeat=8)
        if abs(np.dot(signs, diffs) / 8) >= threshold
    )
    assert result.exact is True
    assert result.p_value == (1 + count) / 257
    assert result.p_value < 1.0  # the wrap bug forced this to exactly 1.0


def test_exact_branch_ignores_the_seed():
    rng = np.random.default_rng(42)
    a = rng.uniform(0, 1, 10).tolist()
    b = rng.uniform(0, 1, 10).tolist()
    assert fisher_test(a, b, seed=0).p_value == fisher_test(a, b, seed=99).p_value


def test_constant_shift_is_detected_as_significant():
    rng = np.random.default_rng(3)
    b = rng.normal(0.0, 1.0, 200)
    a = b + 0.1
    result = fisher_test(a.tolist(), b.tolist(), seed=1)
    assert result.p_value < 0.05
    assert result.exact is False
    assert result.permutations == 10000
    assert result.statistic == pytest.approx(0.1, abs=1e-9)


def test_sampled_branch_is_seed_reproducible():
    rng = np.random.default_rng(8)
    a = rng.uniform(0, 1, 14).tolist()  # 2**14 exceeds the default budget
    b = rng.uniform(0, 1, 14).tolist()
    first = fisher_test(a, b, seed=5)
    second = fisher_test(a, b, seed=5)
    assert first.exact is False
    assert first.p_value == second.p_value
    assert 0.0 < first.p_value <= 1.0


def test_null_differences_are_rarely_significant():
    """With mean-zero paired differences the p-value is near-uniform, so the
    share of reps above 0.05 should be close to 95 in 100."""
    master = np.random.default_rng(2026)
    high = 0
    for rep in range(100):
        diff = master.normal(0.0, 1.0, 50)
        base = master.uniform(0.0, 1.0, 50)
        result = fisher_test((base + diff).tolist(), base.tolist(), seed=rep)
        if result.p_value > 0.05:
            high += 1
    assert high >= 85


def test_significance_input_validation():
    with pytest.raises(ConfigError, match="at least 1000"):
        fisher_test([1.0, 2.0], [1.0, 0.0], permutations=999)
    with pytest.raises(DataError, match="differ in length"):
        fisher_test([1.0, 2.0], [1.0])
    with pytest.raises(DataError, match="empty"):
        fisher_test([], [])


def test_significance_result_serializes():
    result = fisher_test([1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], seed=7)
    payload = result.to_json()
    assert payload == {
        "statistic": 1.0,
        "p_value": pytest.approx(3.0 / 17.0),
        "permutations": 16,
        "seed": 7,
        "exact": True,
    }
    json.dumps(payload)


# --- error analysis -----------------------------------------------------------


def test_model_compared_against_itself_yields_nothing(eval_model, eval_rows, eval_world):
    assert error_analysis(eval_model, eval_model, eval_rows, eval_world.vocabulary, k=10) == []


def test_entries_are_strict_wins_for_the_second_model(eval_model, eval_rows, eval_world):
    other = _eval_model(4)
    entries = error_analysis(eval_model, other, eval_rows, eval_world.vocabulary, k=1000)
    assert entries  # the two inits disagree on plenty of examples
    by_id = {ex.id: ex for ex in eval_rows}
    for entry in entries:
        assert entry["model_b"]["f1"] > entry["model_a"]["f1"]
        ex = by_id[entry["id"]]
        assert entry["question"] == list(ex.question)
        assert entry["context"] == list(ex.context)
        gold = entry["gold"]
        assert gold["text"] == list(ex.context[gold["begin"] : gold["end"] + 1])
        for side in ("model_a", "model_b"):
            assert sorted(entry[side]) == ["begin", "end", "f1", "prediction", "score"]


def test_sampling_caps_at_k_and_is_seeded(eval_model, eval_rows, eval_world):
    other = _eval_model(4)
    full = error_analysis(eval_model, other, eval_rows, eval_world.vocabulary, k=1000)
    assert len(full) > 5
    first = error_analysis(eval_model, other, eval_rows, eval_world.vocabulary, k=5, seed=0)
    again = error_analysis(eval_model, other, eval_rows, eval_world.vocabulary, k=5, seed=0)
    shifted = error_analysis(eval_model, other, eval_rows, eval_world.vocabulary, k=5, seed=9)
    assert len(first) == 5
    assert [e["id"] for e in first] == [e["id"] for e in again]
    assert [e["id"] for e in first] != [e["id"] for e in shifted]
    assert {e["id"] for e in first} <= {e["id"] for e in full}


def test_k_must_be_positive(eval_model, eval_rows, eval_world):
    with pytest.raises(ConfigError, match="at least 1"):
        error_analysis(eval_model, eval_model, eval_rows, eval_world.vocabulary, k=0)


# --- JSON-lines IO ------------------------------------------------------------


def test_json_lines_round_trip(tmp_path):
    records = [{"b": 2, "a": [1, {"c": "x"}]}, {"n": None}, {"f": 0.5}]
    path = tmp_path / "rows.jsonl"
    write_json_lines(path, records)
    assert read_json_lines(path) == records


def test_json_lines_are_compact_sorted_and_blank_tolerant(tmp_path):
    path = tmp_path / "rows.jsonl"
    write_json_lines(path, [{"b": 2, "a": 1}])
    assert path.read_text(encoding="utf-8") == '{"a":1,"b":2}\n'
    path.write_text('{"a":1}\n\n{"b":2}\n', encoding="utf-8")
    assert read_json_lines(path) == [{"a": 1}, {"b": 2}]


def test_malformed_json_line_reports_its_number(tmp_path):
    path = tmp_path / "rows.jsonl"
    path.write_text('{"ok":1}\n{broken\n', encoding="utf-8")
    with pytest.raises(DataError, match=r":2: malformed"):
        read_json_lines(path)
