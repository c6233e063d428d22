"""Command-line entry point: ``temporal-noise <subcommand>``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .bench import (
    ConfigError,
    ExperimentConfig,
    emit_reconstruction_curves,
    empirical_noise_estimate,
    read_trajectory,
    run_cell,
    write_report,
    write_trajectory,
)
from .data import DatasetError, HmmSpec, generate_hmm, load_dataset, save_dataset
from .noise import NoiseSpecError, corrupt_labels
from .train import TrainConfigError

CONFIG_ERRORS = (ConfigError, DatasetError, NoiseSpecError, TrainConfigError, FileNotFoundError)


class CellFailure(Exception):
    """A grid cell failed; the message names it."""


def _load_doc(path) -> dict:
    if path is None:
        return {}
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def _experiment(config, seed, out, parallelism, estimators) -> ExperimentConfig:
    doc = _load_doc(config)
    if seed is not None:
        doc["seeds"] = [seed]
    if out is not None:
        doc["out"] = out
    if parallelism is not None:
        doc["parallelism"] = parallelism
    if estimators:
        doc["estimators"] = [e.strip() for e in estimators.split(",") if e.strip()]
    return ExperimentConfig.from_dict(doc)


config_option = click.option("--config", "config", type=click.Path(dir_okay=False), help="YAML config file.")
seed_option = click.option("--seed", type=int, default=None, help="Seed (overrides the config's seed list).")


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-v) or debug detail (-vv).")
def cli(verbose: int) -> None:
    """Temporal label-noise experiments."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Dataset file to write.")
def generate(config, seed, out):
    """Sample an HMM dataset (the config's ``dataset`` section) and write it."""
    params = dict(_load_doc(config).get("dataset") or {})
    params.pop("generator", None)
    if "path" in params:
        raise ConfigError("generate needs generator parameters, not a dataset path")
    try:
        spec = HmmSpec(**params, seed=seed if seed is not None else 0)
    except TypeError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    save_dataset(generate_hmm(spec), out)
    click.echo(f"wrote {spec.n} sequences to {out}")


@cli.command()
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Corrupted dataset file.")
def corrupt(dataset, config, seed, out):
    """Draw noisy labels for DATASET from the config's noise function."""
    data = load_dataset(dataset)
    if data.clean_labels is None:
        raise DatasetError(f"{dataset}: no clean labels to corrupt")
    doc = _load_doc(config)
    if "noise" not in doc:
        raise ConfigError("config has no 'noise' section")
    probe = ExperimentConfig.from_dict({"dataset": {"path": dataset}, "noise": doc["noise"],
                                        "estimators": ["ignore"], "seeds": [0]})
    save_dataset(corrupt_labels(data, probe.noise_spec(), seed if seed is not None else 0), out)
    click.echo(f"wrote {out}")


@cli.command()
@config_option
@seed_option
@click.option("--estimators", required=True, help="The single estimator to train.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
def train(config, seed, estimators, out):
    """Train one (estimator, seed) cell and write its checkpoint and report."""
    cfg = _experiment(config, seed, out, 1, estimators)
    if len(cfg.estimators) != 1 or len(cfg.seeds) != 1:
        raise ConfigError("train runs exactly one estimator and one seed (use --estimators and --seed)")
    from .bench import ExperimentReport

    cell = run_cell(cfg, cfg.estimators[0], cfg.seeds[0])
    report = ExperimentReport(cfg.to_dict(), cfg.noise_spec().to_dict(), [cell],
                              {f"{cell.estimator}/seed_{cell.seed}": cell.runtime})
    write_report(report, cfg.out, cfg.noise_spec())
    if cell.status != "ok":
        raise CellFailure(f"cell {cell.estimator}/seed {cell.seed} failed: {cell.error}")
    _summary(report)


@cli.command()
@config_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--parallelism", type=int, default=None, help="Worker processes for the cell grid.")
@click.option("--estimators", default=None, help="Comma-separated estimator list (overrides the config).")
def run(config, seed, out, parallelism, estimators):
    """Run the full (estimator x seed) grid of an experiment config."""
    if config is None:
        raise ConfigError("run needs --config")
    from .bench import run_experiment

    report = run_experiment(_experiment(config, seed, out, parallelism, estimators))
    _summary(report)
    if report.failures:
        names = ", ".join(f"{c.estimator}/seed {c.seed} ({c.error})" for c in report.failures)
        raise CellFailure(f"{len(report.failures)} cell(s) failed: {names}")


@cli.command("estimate-noise")
@click.argument("dataset", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Trajectory table to write.")
def estimate_noise(dataset, out):
    """Per-step clean/noisy disagreement matrices of a paired-label DATASET."""
    est = empirical_noise_estimate(load_dataset(dataset))
    write_trajectory(est.trajectory, out)
    counts_path = Path(out).with_suffix(".counts.tsv")
    counts_path.write_text("\n".join("\t".join(str(int(c)) for c in row) for row in est.counts) + "\n")
    for t, i in zip(*np.nonzero(est.empty_rows)):
        click.echo(f"warning: no examples of class {i + 1} at t={t + 1}; row set to identity", err=True)
    click.echo(f"wrote {out} and {counts_path}")


@cli.command()
@click.argument("trajectories", nargs=-1, required=True)
@config_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Long-format table to write.")
def curves(trajectories, config, out):
    """Tabulate estimated vs true noise curves.

    Each TRAJECTORIES item is ``name=path`` or a path (named by its file stem);
    the truth is the config's noise function.
    """
    doc = _load_doc(config)
    if "noise" not in doc:
        raise ConfigError("curves needs a config with a 'noise' section")
    loaded = {}
    for item in trajectories:
        name, _, path = item.rpartition("=") if "=" in item else (Path(item).stem, "", item)
        loaded[name] = read_trajectory(path)
    T, C = next(iter(loaded.values())).shape[:2]
    probe = ExperimentConfig.from_dict({"dataset": {"generator": "hmm", "T": T, "C": C}, "noise": doc["noise"],
                                        "estimators": ["ignore"], "seeds": [0]})
    rows = emit_reconstruction_curves(probe.noise_spec(), loaded, out)
    click.echo(f"wrote {rows} rows to {out}")


def _summary(report) -> None:
    for row in report.aggregates():
        te, ae = row["test_error_mean"], row["approx_error_mean"]
        click.echo(f"{row['estimator']:>14}  test error {'-' if te is None else f'{te:6.2f}%'}"
                   f"  approx error {'-' if ae is None else f'{ae:6.2f}%'}  ok {row['n_ok']}/{row['n_ok'] + row['n_failed']}")
    click.echo(json.dumps({"out": report.config["out"]}))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="temporal-noise", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:  # usage errors count as configuration errors
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except CONFIG_ERRORS as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except CellFailure as exc:
        click.echo(f"runtime failure: {exc}", err=True)
        return 2
    except Exception as exc:
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
