"""Command-line driver.

Subcommands: gen, augment, train, eval, compare, stats. Every command
takes --config (JSON) plus --set dotted overrides, and exits with 0 on
success, 1 on data/I-O failures, 2 on configuration errors, and 3 on
numeric failures.
"""

from __future__ import annotations

import functools
import json
import sys

import click

from . import pipeline
from .config import load_config
from .errors import ConfigError, DataError, NumericError
from .model import UnpackableExample
from .version import VERSION

EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except ConfigError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(EXIT_CONFIG)
        except NumericError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(EXIT_NUMERIC)
        except (DataError, UnpackableExample, OSError) as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(EXIT_DATA)

    return wrapper


def _config_options(fn):
    fn = click.option(
        "--config", "config_path", type=click.Path(), default=None, help="JSON config file."
    )(fn)
    fn = click.option(
        "--set",
        "sets",
        multiple=True,
        metavar="KEY=VALUE",
        help="Dotted config override, e.g. --set train.method=tq",
    )(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    return fn


@click.group()
@click.version_option(VERSION, prog_name="xlingqa")
def main() -> None:
    """Cross-lingual extractive QA laboratory on synthetic languages."""


@main.command()
@_config_options
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
@_guard
def gen(config_path, sets, seed, out_dir) -> None:
    """Generate the world, the training corpus, and the evaluation matrix."""
    config = load_config(config_path, list(sets), seed)
    result = pipeline.run_gen(config, out_dir)
    click.echo(json.dumps(result["metrics"], sort_keys=True))


@main.command()
@_config_options
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Directory with world.json and train.jsonl.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
@click.option("--strategy", default=None, help="tq, tc, tqc, or tall (default: config.strategy).")
@_guard
def augment(config_path, sets, seed, data_dir, out_dir, strategy) -> None:
    """Build a translation-augmented dataset plus its stats sidecar."""
    config = load_config(config_path, list(sets), seed)
    result = pipeline.run_augment(config, data_dir, out_dir, strategy=strategy)
    click.echo(json.dumps(result["metrics"], sort_keys=True))


@main.command()
@_config_options
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Directory with world.json and datasets.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
@click.option("--resume", is_flag=True, help="Continue from this directory's checkpoint.")
@_guard
def train(config_path, sets, seed, data_dir, out_dir, resume) -> None:
    """Train the configured method; write checkpoint, trace, manifest."""
    config = load_config(config_path, list(sets), seed)
    result = pipeline.run_train(config, data_dir, out_dir, resume=resume)
    click.echo(json.dumps(result["metrics"], sort_keys=True))


@main.command(name="eval")
@_config_options
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Directory with world.json and eval.jsonl.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
@click.option("--checkpoint", type=click.Path(), default=None, help="Checkpoint path (default: <out>/checkpoint.bin).")
@click.option("--workers", type=int, default=None, help="Parallel scoring processes.")
@_guard
def eval_cmd(config_path, sets, seed, data_dir, out_dir, checkpoint, workers) -> None:
    """Evaluate a checkpoint; write report.json and predictions.jsonl."""
    config = load_config(config_path, list(sets), seed)
    result = pipeline.run_eval(config, data_dir, out_dir, checkpoint=checkpoint, workers=workers)
    click.echo(json.dumps(result["metrics"], sort_keys=True))


@main.command()
@_config_options
@click.option("--a", "dir_a", type=click.Path(), required=True, help="Baseline run directory (predictions.jsonl).")
@click.option("--b", "dir_b", type=click.Path(), required=True, help="Candidate run directory (predictions.jsonl).")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory.")
@click.option("--data", "data_dir", type=click.Path(), default=None, help="Eval data directory for dump enrichment.")
@_guard
def compare(config_path, sets, seed, dir_a, dir_b, out_dir, data_dir) -> None:
    """Paired significance test of run B against run A."""
    config = load_config(config_path, list(sets), seed)
    result = pipeline.run_compare(config, dir_a, dir_b, out_dir, data_dir=data_dir)
    click.echo(json.dumps(result["metrics"], sort_keys=True))


@main.command()
@click.option("--data", "data_path", type=click.Path(), default=None, help="Dataset JSONL file or directory.")
@click.option("--report", "report_path", type=click.Path(), default=None, help="report.json to re-aggregate.")
@_guard
def stats(data_path, report_path) -> None:
    """Dataset statistics, or a consistency check of an eval report."""
    result = pipeline.run_stats(data_path=data_path, report_path=report_path)
    click.echo(json.dumps(result, sort_keys=True))


if __name__ == "__main__":
    main()
