"""Experiment stages as library functions, plus the end-to-end preset run.

Each stage writes its artifacts under a fixed name into its output
directory and finishes with an atomically written manifest.json. With a
fixed seed every artifact is byte-reproducible (manifests carry a
wall-clock field that is exempt from that claim).
"""

from __future__ import annotations

import json
import math
import os
import time
from typing import Sequence

import numpy as np

from . import augment as aug
from . import evalkit, presets, trainer
from .config import ExperimentConfig, config_from_dict
from .corpus import (
    Answer,
    RawExample,
    World,
    generate_examples,
    generate_world,
    question_type_stats,
    read_jsonl,
    read_world,
    write_jsonl,
    write_world,
)
from .errors import ConfigError, DataError
from .model import Discriminator, QAModel
from .trainer import TrainConfig, parse_method
from .version import VERSION

WORLD_FILE = "world.json"
TRAIN_FILE = "train.jsonl"
EVAL_FILE = "eval.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
TRACE_FILE = "trace.csv"
REPORT_FILE = "report.json"
PREDICTIONS_FILE = "predictions.jsonl"
COMPARE_FILE = "compare.json"
ANALYSIS_FILE = "analysis.jsonl"
MANIFEST_FILE = "manifest.json"

_PIPELINE_METHODS = ("zs", "tq", "at-all", "laf-psaqs-all")


def _write_json(path, payload: dict) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_dir, command: str, config: ExperimentConfig, artifacts: dict, metrics: dict, started: float) -> str:
    path = os.path.join(out_dir, MANIFEST_FILE)
    _write_json(
        path,
        {
            "command": command,
            "version": VERSION,
            "config": config.to_dict(),
            "artifacts": {k: str(v) for k, v in sorted(artifacts.items())},
            "final_metrics": metrics,
            "wall_clock_seconds": round(time.monotonic() - started, 3),
        },
    )
    return path


def _all_langs(world: World) -> list[str]:
    return ["en"] + world.codes


def resolve_cells(config: ExperimentConfig, world: World) -> list[tuple[str, str]]:
    langs = _all_langs(world)
    if config.eval_cells == "all":
        return [(q, c) for q in langs for c in langs]
    known = set(langs)
    for q, c in config.eval_cells:
        if q not in known or c not in known:
            raise ConfigError(f"eval cell ({q}, {c}) uses a language outside {langs}")
    return list(config.eval_cells)


def build_eval_matrix(
    world: World, base: Sequence[RawExample], cells: Sequence[tuple[str, str]], seed: int
) -> list[RawExample]:
    """Materialize every (question_lang, context_lang) cell from the base set.

    Context translations keep their gold span through tag alignment; rows
    whose tags fail to survive (lossy worlds) are dropped.
    """
    translator = aug.SyntheticTranslator(world)
    rows: list[RawExample] = []
    for q_lang, c_lang in cells:
        for ex in base:
            question = (
                ex.question if q_lang == "en" else tuple(translator.translate(ex.question, q_lang, seed))
            )
            if c_lang == "en":
                context, answer = ex.context, ex.answer
            else:
                res = aug.align_answer(
                    ex.context, (ex.answer.begin, ex.answer.end), translator, c_lang, seed
                )
                if res is None:
                    continue
                context, (b, e) = res
                answer = Answer(begin=b, end=e, text=tuple(context[b : e + 1]))
            rows.append(
                RawExample(
                    id=f"{ex.id}@{q_lang}.{c_lang}",
                    question=question,
                    context=context,
                    answer=answer,
                    q_lang=q_lang,
                    c_lang=c_lang,
                )
            )
    return rows


def run_gen(config: ExperimentConfig, out_dir) -> dict:
    """World + English training corpus + cross-lingual evaluation matrix."""
    started = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    world = generate_world(
        config.seed,
        num_languages=config.world.num_languages,
        vocab_size=config.world.vocab_size,
        tag_safety=config.world.tag_safety,
    )
    train = generate_examples(world, config.corpus.train_size, config.seed, id_prefix="train")
    eval_base = generate_examples(world, config.corpus.eval_size, config.seed + 1, id_prefix="eval")
    eval_rows = build_eval_matrix(world, eval_base, resolve_cells(config, world), config.seed)

    world_path = os.path.join(out_dir, WORLD_FILE)
    train_path = os.path.join(out_dir, TRAIN_FILE)
    eval_path = os.path.join(out_dir, EVAL_FILE)
    write_world(world, world_path)
    write_jsonl(train, train_path)
    write_jsonl(eval_rows, eval_path)
    artifacts = {"world": world_path, "train": train_path, "eval": eval_path}
    metrics = {
        "train_examples": len(train),
        "eval_rows": len(eval_rows),
        "languages": _all_langs(world),
        "question_types": question_type_stats(train),
    }
    artifacts["manifest"] = _write_manifest(out_dir, "gen", config, artifacts, metrics, started)
    return {"artifacts": artifacts, "metrics": metrics}


def _aug_paths(out_dir, strategy: str) -> tuple[str, str]:
    return (
        os.path.join(out_dir, f"aug-{strategy}.jsonl"),
        os.path.join(out_dir, f"aug-{strategy}.stats.json"),
    )


def _build_strategy(strategy: str, base, world, translator, seed: int) -> aug.AugmentedDataset:
    if strategy == "tall":
        return aug.build_translate_all(
            aug.build_translate_q(base, world, translator, seed),
            aug.build_translate_c(base, world, translator, seed),
            aug.build_translate_qc(base, world, translator, seed),
        )
    try:
        builder = aug.BUILDERS[strategy]
    except KeyError:
        raise ConfigError(
            f"unknown augmentation strategy {strategy!r}; choose from {sorted(aug.BUILDERS) + ['tall']}"
        ) from None
    return builder(base, world, translator, seed)


def run_augment(config: ExperimentConfig, data_dir, out_dir, strategy: str | None = None) -> dict:
    """Translate the base corpus under one strategy; write data + stats."""
    started = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    strategy = (strategy or config.strategy).lower()
    world = read_world(os.path.join(data_dir, WORLD_FILE))
    base = read_jsonl(os.path.join(data_dir, TRAIN_FILE))
    dataset = _build_strategy(strategy, base, world, aug.SyntheticTranslator(world), config.seed)
    data_path, stats_path = _aug_paths(out_dir, strategy)
    write_jsonl(dataset.examples, data_path)
    _write_json(stats_path, dataset.sidecar())
    artifacts = {"dataset": data_path, "stats": stats_path}
    metrics = {
        "strategy": strategy,
        "size": len(dataset.examples),
        "kept": dataset.kept,
        "failed": dataset.failed,
    }
    artifacts["manifest"] = _write_manifest(out_dir, "augment", config, artifacts, metrics, started)
    return {"artifacts": artifacts, "metrics": metrics, "dataset": dataset}


def _dataset_for_method(method: str, data_dir, world: World) -> list[RawExample]:
    kind, _variant, target = parse_method(method)
    if kind == "supervised":
        name = TRAIN_FILE if method == "zs" else f"aug-{method}.jsonl"
        return read_jsonl(os.path.join(data_dir, name))
    examples = read_jsonl(os.path.join(data_dir, "aug-tq.jsonl"))
    if target != "all":
        if target not in world.codes:
            raise ConfigError(f"target language {target!r} not in world languages {world.codes}")
        examples = [ex for ex in examples if ex.q_lang in ("en", target)]
    return examples


def _train_config(config: ExperimentConfig, method: str) -> TrainConfig:
    t = config.train
    return TrainConfig(
        method=method,
        learning_rate=t.learning_rate,
        weight_decay=t.weight_decay,
        epochs=t.epochs if t.epochs is not None else presets.default_epochs(method),
        batch_size=t.batch_size,
        seed=config.seed,
        repr_mode=t.repr_mode,
        lambda_adv=t.lambda_adv,
        lambda_psa=t.lambda_psa,
        lambda_qs=t.lambda_qs,
        doc_stride=t.doc_stride,
        max_answer_len=t.max_answer_len,
    )


def run_train(config: ExperimentConfig, data_dir, out_dir, resume: bool = False) -> dict:
    """Train the configured method from the data directory's corpora."""
    started = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    world = read_world(os.path.join(data_dir, WORLD_FILE))
    method = config.train.method.lower()
    kind, _variant, target = parse_method(method)
    examples = _dataset_for_method(method, data_dir, world)
    train_cfg = _train_config(config, method)

    checkpoint_path = os.path.join(out_dir, CHECKPOINT_FILE)
    trace_path = os.path.join(out_dir, TRACE_FILE)

    disc = None
    adam = disc_adam = None
    start_step = 0
    if resume:
        loaded = trainer.load_checkpoint(checkpoint_path)
        model = loaded.model
        disc = loaded.disc
        adam = loaded.adam
        disc_adam = loaded.disc_adam
        start_step = int(loaded.header.get("extra", {}).get("global_step", 0))
    else:
        encoder = presets.encoder_from_preset(
            config.encoder.preset,
            vocab_size=world.vocabulary.size,
            seed=config.seed,
            dropout_rate=config.encoder.dropout_rate,
        )
        model = QAModel.initialize(encoder, _all_langs(world))
        if kind == "adversarial":
            labels = _all_langs(world) if target == "all" else ["en", target]
            disc = Discriminator.initialize(encoder.hidden_dim, labels, config.seed)

    vocab = world.vocabulary
    if kind == "supervised":
        adam = adam or trainer.AdamState.from_params(model.named_parameters())
        traces = trainer.train_supervised(
            model, examples, vocab, train_cfg, trace_path=trace_path, start_step=start_step, adam=adam
        )
        steps = len(traces["qa_loss"])
    elif kind == "adversarial":
        if disc is None:
            raise DataError("resumed adversarial run has no discriminator in its checkpoint")
        adam = adam or trainer.AdamState.from_params(model.named_parameters())
        disc_adam = disc_adam or trainer.AdamState.from_params(disc.named_parameters())
        traces = trainer.train_adversarial(
            model,
            disc,
            examples,
            vocab,
            train_cfg,
            trace_path=trace_path,
            start_step=start_step,
            adam=adam,
            disc_adam=disc_adam,
        )
        steps = len(traces["qa_loss"])
    else:
        adam = adam or trainer.AdamState.from_params(model.named_parameters())
        traces = trainer.train_laf(
            model, examples, vocab, train_cfg, trace_path=trace_path, start_step=start_step, adam=adam
        )
        steps = len(traces["qa_loss_en"])

    trainer.save_checkpoint(
        checkpoint_path,
        model,
        disc=disc,
        adam=adam,
        disc_adam=disc_adam,
        extra={"global_step": start_step + steps, "method": method},
    )
    artifacts = {"checkpoint": checkpoint_path, "trace": trace_path}
    metrics = {name: (values[-1] if values else None) for name, values in traces.items()}
    metrics["steps"] = start_step + steps
    artifacts["manifest"] = _write_manifest(out_dir, "train", config, artifacts, metrics, started)
    return {"artifacts": artifacts, "metrics": metrics, "model": model, "disc": disc}


def run_eval(
    config: ExperimentConfig, data_dir, out_dir, checkpoint=None, workers: int | None = None
) -> dict:
    """Score a checkpoint over the evaluation matrix; write report + rows."""
    started = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    world = read_world(os.path.join(data_dir, WORLD_FILE))
    eval_path = os.path.join(data_dir, EVAL_FILE)
    if not os.path.exists(eval_path):
        raise DataError(f"evaluation file {eval_path} does not exist")
    examples = read_jsonl(eval_path)
    checkpoint = checkpoint or os.path.join(out_dir, CHECKPOINT_FILE)
    loaded = trainer.load_checkpoint(checkpoint)
    report = evalkit.evaluate(
        loaded.model,
        examples,
        world.vocabulary,
        doc_stride=config.eval.doc_stride,
        max_answer_len=config.eval.max_answer_len,
        workers=workers if workers is not None else config.eval.workers,
    )
    report_path = os.path.join(out_dir, REPORT_FILE)
    predictions_path = os.path.join(out_dir, PREDICTIONS_FILE)
    _write_json(report_path, report.to_json())
    evalkit.write_json_lines(predictions_path, report.rows)
    artifacts = {"report": report_path, "predictions": predictions_path}
    metrics = {"xlt": report.xlt, "gxlt": report.gxlt, "examples": len(report.rows)}
    artifacts["manifest"] = _write_manifest(out_dir, "eval", config, artifacts, metrics, started)
    return {"artifacts": artifacts, "metrics": metrics, "report": report}


def _paired_scores(rows_a: list[dict], rows_b: list[dict]) -> tuple[list[str], list[float], list[float]]:
    by_a = {r["id"]: r for r in rows_a}
    by_b = {r["id"]: r for r in rows_b}
    if len(by_a) != len(rows_a) or len(by_b) != len(rows_b):
        raise DataError("prediction files contain duplicate example ids")
    if by_a.keys() != by_b.keys():
        for i in sorted(by_a.keys() ^ by_b.keys()):
            raise DataError(f"prediction files disagree on example ids; first divergence: {i!r}")
    ids = sorted(by_a)
    return ids, [float(by_a[i]["f1"]) for i in ids], [float(by_b[i]["f1"]) for i in ids]


def run_compare(
    config: ExperimentConfig, dir_a, dir_b, out_dir, data_dir=None
) -> dict:
    """Paired significance test of system B against system A plus a dump of
    B's wins."""
    started = time.monotonic()
    os.makedirs(out_dir, exist_ok=True)
    rows_a = evalkit.read_json_lines(os.path.join(dir_a, PREDICTIONS_FILE))
    rows_b = evalkit.read_json_lines(os.path.join(dir_b, PREDICTIONS_FILE))
    ids, scores_a, scores_b = _paired_scores(rows_a, rows_b)
    result = evalkit.fisher_test(
        scores_a, scores_b, permutations=config.compare.permutations, seed=config.seed
    )

    examples = None
    if data_dir is not None:
        examples = {ex.id: ex for ex in read_jsonl(os.path.join(data_dir, EVAL_FILE))}
    by_a = {r["id"]: r for r in rows_a}
    by_b = {r["id"]: r for r in rows_b}
    wins = []
    for i in ids:
        fa, fb = float(by_a[i]["f1"]), float(by_b[i]["f1"])
        if fb <= fa:
            continue
        entry = {
            "id": i,
            "f1_a": fa,
            "f1_b": fb,
            "prediction_a": by_a[i].get("prediction"),
            "prediction_b": by_b[i].get("prediction"),
        }
        ex = examples.get(i) if examples else None
        if ex is not None:
            entry["question"] = list(ex.question)
            entry["context"] = list(ex.context)
            entry["gold"] = {"begin": ex.answer.begin, "end": ex.answer.end, "text": list(ex.answer.text)}
            entry["q_lang"] = ex.q_lang
            entry["c_lang"] = ex.c_lang
        wins.append(entry)
    if len(wins) > config.compare.max_examples:
        rng = np.random.default_rng([config.seed, 0xEA])
        keep = sorted(rng.choice(len(wins), size=config.compare.max_examples, replace=False).tolist())
        wins = [wins[i] for i in keep]

    compare_path = os.path.join(out_dir, COMPARE_FILE)
    analysis_path = os.path.join(out_dir, ANALYSIS_FILE)
    n_a = sum(1 for i in ids if by_a[i]["f1"] > by_b[i]["f1"])
    n_b = sum(1 for i in ids if by_b[i]["f1"] > by_a[i]["f1"])
    payload = dict(result.to_json())
    payload.update(
        {"n_pairs": len(ids), "wins_a": n_a, "wins_b": n_b, "ties": len(ids) - n_a - n_b}
    )
    _write_json(compare_path, payload)
    evalkit.write_json_lines(analysis_path, wins)
    artifacts = {"compare": compare_path, "analysis": analysis_path}
    artifacts["manifest"] = _write_manifest(out_dir, "compare", config, artifacts, payload, started)
    return {"artifacts": artifacts, "metrics": payload, "result": result}


def run_stats(data_path=None, report_path=None) -> dict:
    """Dataset statistics, or a self-consistency check of a report file."""
    if report_path is not None:
        with open(report_path, "r", encoding="utf-8") as fh:
            try:
                rep = json.load(fh)
            except json.JSONDecodeError as err:
                raise DataError(f"{report_path}: malformed report JSON ({err.msg})") from None
        try:
            matrix = rep["matrix"]
            xlt, gxlt = evalkit.matrix_means(matrix)
            stored_xlt, stored_gxlt = float(rep["xlt"]), float(rep["gxlt"])
        except (KeyError, TypeError) as err:
            raise DataError(f"{report_path}: malformed report ({err})") from None
        return {
            "xlt": stored_xlt,
            "gxlt": stored_gxlt,
            "recomputed_xlt": xlt,
            "recomputed_gxlt": gxlt,
            "consistent": bool(
                math.isclose(xlt, stored_xlt, rel_tol=0, abs_tol=1e-9)
                and math.isclose(gxlt, stored_gxlt, rel_tol=0, abs_tol=1e-9)
            ),
        }
    if data_path is None:
        raise ConfigError("stats needs a dataset file or a report file")
    if os.path.isdir(data_path):
        data_path = os.path.join(data_path, TRAIN_FILE)
    examples = read_jsonl(data_path)
    by_cell: dict[str, int] = {}
    for ex in examples:
        key = f"{ex.q_lang}.{ex.c_lang}"
        by_cell[key] = by_cell.get(key, 0) + 1
    stats = aug.corpus_stats(examples).to_dict()
    stats["language_pairs"] = dict(sorted(by_cell.items()))
    return stats


def run_paper_pipeline(out_root, seed: int = 0, overrides: dict | None = None) -> dict:
    """End-to-end preset: generate data, build all four augmentation sets,
    train the four flagship methods, evaluate each, and compare each
    against the English-only baseline.

    `overrides` is a nested partial config dict merged over the defaults;
    it is how tests shrink the run. Returns the paths of everything written.
    """

    def _merge(base: dict, extra: dict) -> dict:
        for key, value in extra.items():
            if isinstance(value, dict) and isinstance(base.get(key), dict):
                _merge(base[key], value)
            else:
                base[key] = value
        return base

    data = _merge({"seed": seed}, dict(overrides or {}))
    config = config_from_dict(data)

    data_dir = os.path.join(out_root, "data")
    gen_out = run_gen(config, data_dir)
    for strategy in ("tq", "tc", "tqc", "tall"):
        run_augment(config, data_dir, data_dir, strategy=strategy)

    runs: dict[str, dict] = {}
    for method in _PIPELINE_METHODS:
        method_cfg = config_from_dict(_merge(config.to_dict(), {"train": {"method": method}}))
        run_dir = os.path.join(out_root, "runs", method)
        train_out = run_train(method_cfg, data_dir, run_dir)
        eval_out = run_eval(method_cfg, data_dir, run_dir)
        runs[method] = {
            "dir": run_dir,
            "checkpoint": train_out["artifacts"]["checkpoint"],
            "report": eval_out["artifacts"]["report"],
            "predictions": eval_out["artifacts"]["predictions"],
            "xlt": eval_out["metrics"]["xlt"],
            "gxlt": eval_out["metrics"]["gxlt"],
        }

    compares: dict[str, dict] = {}
    for method in _PIPELINE_METHODS[1:]:
        cmp_dir = os.path.join(out_root, "compare", f"{method}-vs-zs")
        cmp_out = run_compare(
            config, runs["zs"]["dir"], runs[method]["dir"], cmp_dir, data_dir=data_dir
        )
        compares[method] = {
            "dir": cmp_dir,
            "compare": cmp_out["artifacts"]["compare"],
            "p_value": cmp_out["metrics"]["p_value"],
        }

    return {"out": str(out_root), "data_dir": data_dir, "gen": gen_out["metrics"], "runs": runs, "compares": compares}
