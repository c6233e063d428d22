"""Experiment harness: configuration, multi-seed runs, metrics and report files.

One experiment is a grid of cells, one per (estimator, seed). For every seed
the harness builds a dataset, splits it 80/20, corrupts the training labels
only and hands each estimator a copy of the training set without its clean
track. Clean labels are used for metrics and for the ``clean`` reference model.
"""

from __future__ import annotations

import csv
import ctypes
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import yaml

from . import __version__
from .data import DatasetError, HmmSpec, SequenceDataset, generate_hmm, load_dataset, split
from .model import predict_labels, save_checkpoint
from .noise import NoiseFunctionSpec, NoiseSpecError, approximation_error, corrupt_labels, regime, sample_trajectory
from .train import ESTIMATORS, TrainConfig, TrainConfigError, TrainedModel, train_estimator, train_ignore

log = logging.getLogger(__name__)

REPORT_FORMAT = "temporal-noise-report/1"
# "clean" is a reference model fitted on clean training labels, not an estimator
BENCH_ESTIMATORS = ESTIMATORS + ("clean",)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ metrics


def clean_test_error(model, test: SequenceDataset) -> float:
    """Percentage of (sequence, step) pairs whose predicted label differs from the clean one."""
    if test.clean_labels is None:
        raise DatasetError("test set has no clean labels")
    if test.n == 0:
        raise DatasetError("empty test set")
    clf = model.classifier if isinstance(model, TrainedModel) else model
    pred = predict_labels(clf, test.features)
    return 100.0 * float(np.mean(pred != test.clean_labels))


@dataclass
class NoiseEstimate:
    trajectory: np.ndarray  # (T, C, C), descriptive and not validated
    counts: np.ndarray  # (T, C) clean-label counts per step
    empty_rows: np.ndarray  # (T, C) bool; rows with no clean examples were set to identity


def empirical_noise_estimate(dataset: SequenceDataset) -> NoiseEstimate:
    """Per-step disagreement rates between the clean and noisy label tracks."""
    if dataset.clean_labels is None or dataset.noisy_labels is None:
        raise DatasetError("empirical noise estimation needs both clean and noisy labels")
    C, T = dataset.num_classes, dataset.horizon
    joint = np.zeros((T, C, C))
    steps = np.broadcast_to(np.arange(T), dataset.clean_labels.shape)
    np.add.at(joint, (steps, dataset.clean_labels, dataset.noisy_labels), 1.0)
    counts = joint.sum(axis=2)
    empty = counts == 0
    traj = joint / np.where(empty, 1.0, counts)[..., None]
    traj[empty] = np.eye(C)[np.nonzero(empty)[1]]
    return NoiseEstimate(traj, counts.astype(np.int64), empty)


# ------------------------------------------------------------ trajectory files


def write_trajectory(traj: np.ndarray, path) -> None:
    """T rows of C*C row-major entries under a ``# T=.. C=..`` header."""
    traj = np.asarray(traj, dtype=np.float64)
    T, C, _ = traj.shape
    lines = [f"# T={T} C={C}"]
    lines += ["\t".join(repr(float(v)) for v in row) for row in traj.reshape(T, C * C)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    try:
        head = dict(item.split("=") for item in lines[0].lstrip("# ").split())
        T, C = int(head["T"]), int(head["C"])
    except (IndexError, KeyError, ValueError):
        raise DatasetError(f"{path}: missing '# T=.. C=..' header") from None
    rows = [[float(v) for v in line.split("\t")] for line in lines[1:] if line.strip()]
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape != (T, C * C):
        raise DatasetError(f"{path}: expected {T} rows of {C * C} values, got shape {arr.shape}")
    return arr.reshape(T, C, C)


def emit_reconstruction_curves(truth: NoiseFunctionSpec, trajectories: Mapping[str, np.ndarray], path) -> int:
    """Long table (estimator, t, i, j, true, estimated); i, j and t are 1-based. Returns the row count."""
    true = sample_trajectory(truth)
    for name, traj in trajectories.items():
        if np.shape(traj) != true.shape:
            raise NoiseSpecError(f"{name}: trajectory shape {np.shape(traj)} != {true.shape}")
    T, C, _ = true.shape
    rows = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, delimiter="\t", lineterminator="\n")
        out.writerow(["estimator", "t", "i", "j", "true", "estimated"])
        for name, traj in trajectories.items():
            traj = np.asarray(traj, dtype=np.float64)
            for t in range(T):
                for i in range(C):
                    for j in range(C):
                        out.writerow([name, t + 1, i + 1, j + 1, repr(float(true[t, i, j])),
                                      repr(float(traj[t, i, j]))])
                        rows += 1
    return rows


def read_reconstruction_curves(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`emit_reconstruction_curves`: estimator -> (truth, estimate) trajectories."""
    with Path(path).open() as fh:
        records = list(csv.DictReader(fh, delimiter="\t"))
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if not records:
        return out
    T = max(int(r["t"]) for r in records)
    C = max(int(r["i"]) for r in records)
    for r in records:
        if r["estimator"] not in out:
            out[r["estimator"]] = (np.zeros((T, C, C)), np.zeros((T, C, C)))
        truth, est = out[r["estimator"]]
        key = (int(r["t"]) - 1, int(r["i"]) - 1, int(r["j"]) - 1)
        truth[key], est[key] = float(r["true"]), float(r["estimated"])
    return out


# ------------------------------------------------------------------ config


_TOP_KEYS = {"dataset", "noise", "estimators", "seeds", "train", "out", "parallelism", "test_fraction"}


@dataclass
class ExperimentConfig:
    """A fully resolved experiment.

    ``dataset`` is either ``{"generator": "hmm", n, d, T, C, variance}`` or
    ``{"path": file}``. ``noise`` is either a regime preset
    ``{"regime": name, "mean": .., "amplitude": .., "periods": ..}`` or an
    explicit noise-function dict.
    """

    dataset: dict
    noise: dict
    estimators: list[str]
    seeds: list[int]
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs/experiment"
    parallelism: int = 1
    test_fraction: float = 0.2

    def __post_init__(self):
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        unknown = [e for e in self.estimators if e not in BENCH_ESTIMATORS]
        if unknown:
            raise ConfigError(f"unknown estimators {unknown}; expected some of {BENCH_ESTIMATORS}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimator list has duplicates")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed list has duplicates")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if "continuous" in self.estimators and \
                self.train.epochs != self.train.outer_iterations * self.train.inner_epochs:
            raise ConfigError("train.epochs must equal outer_iterations * inner_epochs for continuous")
        source = self.dataset
        if ("path" in source) == ("generator" in source):
            raise ConfigError("dataset needs exactly one of 'generator' or 'path'")
        if source.get("generator", "hmm") != "hmm":
            raise ConfigError(f"unknown generator {source['generator']!r}")
        C, T = self.shape()
        spec = self.noise_spec()
        if (spec.num_classes, spec.horizon) != (C, T):
            raise ConfigError(f"noise spec is for C={spec.num_classes}, T={spec.horizon}; dataset has C={C}, T={T}")

    def hmm_spec(self, seed: int) -> HmmSpec:
        params = {k: v for k, v in self.dataset.items() if k != "generator"}
        try:
            return HmmSpec(**params, seed=seed)
        except (TypeError, DatasetError) as exc:
            raise ConfigError(f"dataset: {exc}") from None

    def shape(self) -> tuple[int, int]:
        if "path" in self.dataset:
            header = _read_header(self.dataset["path"])
            return int(header["C"]), int(header["T"])
        spec = self.hmm_spec(0)
        return spec.C, spec.T

    def noise_spec(self) -> NoiseFunctionSpec:
        C, T = self.shape()
        noise = dict(self.noise)
        try:
            if "regime" in noise:
                name = noise.pop("regime")
                return regime(name, num_classes=C, horizon=T, **noise)
            noise.setdefault("num_classes", C)
            noise.setdefault("horizon", T)
            return NoiseFunctionSpec.from_dict(noise)
        except (TypeError, KeyError, NoiseSpecError) as exc:
            raise ConfigError(f"noise: {exc}") from None

    def to_dict(self) -> dict:
        return {"dataset": dict(self.dataset), "noise": dict(self.noise), "estimators": list(self.estimators),
                "seeds": list(self.seeds), "train": self.train.to_dict(), "out": self.out,
                "parallelism": self.parallelism, "test_fraction": self.test_fraction}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a mapping")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("dataset", "noise", "estimators", "seeds"):
            if key not in doc:
                raise ConfigError(f"missing config key {key!r}")
        train = dict(doc.get("train") or {})
        known = {f.name for f in fields(TrainConfig)}
        if set(train) - known:
            raise ConfigError(f"unknown train keys {sorted(set(train) - known)}")
        try:
            train_cfg = TrainConfig(**train)
        except (TypeError, TrainConfigError) as exc:
            raise ConfigError(f"train: {exc}") from None
        dataset = dict(doc["dataset"])
        if "path" not in dataset:
            dataset = dict({"generator": "hmm", **_hmm_defaults()}, **dataset)
        return cls(dataset=dataset, noise=dict(doc["noise"]), estimators=[str(e) for e in doc["estimators"]],
                   seeds=[int(s) for s in doc["seeds"]], train=train_cfg, out=str(doc.get("out", "runs/experiment")),
                   parallelism=int(doc.get("parallelism", 1)), test_fraction=float(doc.get("test_fraction", 0.2)))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc or {})


def _hmm_defaults() -> dict:
    spec = HmmSpec()
    return {"n": spec.n, "d": spec.d, "T": spec.T, "C": spec.C, "variance": spec.variance}


def _read_header(path) -> dict:
    try:
        with Path(path).open() as fh:
            return json.loads(fh.readline())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read dataset header from {path}: {exc}") from None


# ------------------------------------------------------------------ running


def tune_allocator() -> bool:
    """Keep freed large arrays in the heap (glibc only).

    Training allocates and frees the same few MB of GRU buffers every batch;
    glibc's default hands them back to the OS each time and the page faults
    cost about a fifth of an epoch. Returns False where this is unsupported.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, 256 << 20) and libc.mallopt(_M_TRIM_THRESHOLD, 512 << 20))
    except (OSError, AttributeError):
        return False


_M_TRIM_THRESHOLD, _M_MMAP_THRESHOLD = -1, -3


def seed_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds for data, split, corruption and training derived from one seed."""
    data, part, noise, train = np.random.SeedSequence(seed).generate_state(4)
    return {"data": int(data), "split": int(part), "noise": int(noise), "train": int(train)}


def prepare_seed(config: ExperimentConfig, seed: int) -> tuple[SequenceDataset, SequenceDataset]:
    """(train with noisy labels, test with clean labels only) for one seed."""
    streams = seed_streams(seed)
    if "path" in config.dataset:
        full = load_dataset(config.dataset["path"])
        if full.clean_labels is None:
            raise ConfigError(f"{config.dataset['path']}: dataset has no clean labels")
        full = full.replace(noisy_labels=None)
    else:
        full = generate_hmm(config.hmm_spec(streams["data"]))
    train, test = split(full, config.test_fraction, streams["split"])
    return corrupt_labels(train, config.noise_spec(), streams["noise"]), test


@dataclass
class CellResult:
    estimator: str
    seed: int
    status: str  # "ok" or "failed"
    test_error: Optional[float] = None  # percent
    approx_error: Optional[float] = None  # percent; None for estimators without a trajectory
    error: Optional[str] = None
    runtime: float = 0.0
    model: Optional[TrainedModel] = None


def run_cell(config: ExperimentConfig, estimator: str, seed: int,
             data: Optional[tuple[SequenceDataset, SequenceDataset]] = None) -> CellResult:
    t0 = time.perf_counter()
    try:
        train, test = data if data is not None else prepare_seed(config, seed)
        train_cfg = TrainConfig(**dict(config.train.to_dict(), seed=seed_streams(seed)["train"]))
        if estimator == "clean":
            model = train_ignore(train.replace(noisy_labels=train.clean_labels).without_clean_labels(), train_cfg)
            model.estimator = "clean"
        else:
            spec = config.noise_spec() if estimator.startswith("oracle") else None
            model = train_estimator(estimator, train.without_clean_labels(), train_cfg, spec)
        approx = None
        if model.trajectory is not None:
            approx = 100.0 * approximation_error(sample_trajectory(config.noise_spec()), model.trajectory)
        return CellResult(estimator, seed, "ok", clean_test_error(model, test), approx,
                          runtime=time.perf_counter() - t0, model=model)
    except Exception as exc:  # a failing cell must not abort the grid
        log.debug("cell %s/seed %d failed:\n%s", estimator, seed, traceback.format_exc())
        return CellResult(estimator, seed, "failed", error=f"{type(exc).__name__}: {exc}",
                          runtime=time.perf_counter() - t0)


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class ExperimentReport:
    config: dict
    noise: dict
    cells: list[CellResult]
    runtimes: dict = field(default_factory=dict)

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.status != "ok"]

    def cell(self, estimator: str, seed: int) -> CellResult:
        for c in self.cells:
            if c.estimator == estimator and c.seed == seed:
                return c
        raise KeyError((estimator, seed))

    def aggregates(self) -> list[dict]:
        rows = []
        for est in self.config["estimators"]:
            ok = [c for c in self.cells if c.estimator == est and c.status == "ok"]
            row = {"estimator": est, "n_ok": len(ok), "n_failed": sum(
                1 for c in self.cells if c.estimator == est and c.status != "ok")}
            for key in ("test_error", "approx_error"):
                vals = [getattr(c, key) for c in ok if getattr(c, key) is not None]
                row[f"{key}_mean"] = float(np.mean(vals)) if vals else None
                row[f"{key}_std"] = float(np.std(vals)) if vals else None  # population std
            rows.append(row)
        return rows

    def mean(self, estimator: str, key: str = "test_error") -> float:
        for row in self.aggregates():
            if row["estimator"] == estimator:
                value = row[f"{key}_mean"]
                return math.nan if value is None else value
        raise KeyError(estimator)

    def to_dict(self) -> dict:
        cells = [{"estimator": c.estimator, "seed": c.seed, "status": c.status, "test_error_pct": c.test_error,
                  "approx_error_pct": c.approx_error, "error": c.error} for c in self.cells]
        C, T = self.noise["num_classes"], self.noise["horizon"]
        return {
            "format": REPORT_FORMAT,
            "provenance": {"code_version": __version__, "config": self.config, "noise": self.noise,
                           "scale": {"T": T, "C": C, "dataset": self.config["dataset"]}},
            "cells": cells,
            "aggregates": self.aggregates(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def metric_table(self, key: str) -> str:
        seeds = self.config["seeds"]
        lines = ["\t".join(["estimator"] + [f"seed_{s}" for s in seeds] + ["mean", "std"])]
        fmt = lambda v: "nan" if v is None else repr(float(v))
        for row in self.aggregates():
            est = row["estimator"]
            vals = [getattr(self.cell(est, s), key) for s in seeds]
            lines.append("\t".join([est] + [fmt(v) for v in vals] + [fmt(row[f"{key}_mean"]), fmt(row[f"{key}_std"])]))
        return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Run every (estimator, seed) cell and, if ``write``, persist the report and artifacts under ``config.out``."""
    tune_allocator()
    noise = config.noise_spec()
    data = {s: prepare_seed(config, s) for s in config.seeds}
    jobs = [(config, est, s, data[s]) for s in config.seeds for est in config.estimators]
    if config.parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [_run_cell_args(job) for job in jobs]
    for c in cells:
        if c.status == "ok":
            log.info("%s seed %d: test error %.2f%%%s (%.1fs)", c.estimator, c.seed, c.test_error,
                     "" if c.approx_error is None else f", approximation error {c.approx_error:.2f}%", c.runtime)
        else:
            log.warning("%s seed %d failed: %s", c.estimator, c.seed, c.error)
    report = ExperimentReport(config.to_dict(), noise.to_dict(), cells,
                              {f"{c.estimator}/seed_{c.seed}": c.runtime for c in cells})
    if write:
        write_report(report, config.out, noise)
    return report


def write_report(report: ExperimentReport, out, noise: NoiseFunctionSpec) -> None:
    out = Path(out)
    for sub in ("checkpoints", "trajectories", "curves"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "test_error.tsv").write_text(report.metric_table("test_error"))
    (out / "approx_error.tsv").write_text(report.metric_table("approx_error"))
    # wall-clock times differ between identical runs, so they stay out of report.json
    (out / "runtimes.json").write_text(json.dumps(report.runtimes, indent=2, sort_keys=True) + "\n")
    for seed in report.config["seeds"]:
        trajectories = {}
        for c in report.cells:
            if c.seed != seed or c.model is None:
                continue
            stem = f"{c.estimator}_seed{seed}"
            params = dict(c.model.classifier.params, **{f"noise/{k}": v for k, v in c.model.noise_params.items()})
            save_checkpoint(out / "checkpoints" / f"{stem}.json", params,
                            dict(c.model.classifier.metadata(), estimator=c.estimator, seed=seed))
            (out / "curves" / f"training_{stem}.json").write_text(json.dumps(c.model.curve, sort_keys=True) + "\n")
            if c.model.trajectory is not None:
                write_trajectory(c.model.trajectory, out / "trajectories" / f"{stem}.tsv")
                trajectories[c.estimator] = c.model.trajectory
        if trajectories:
            emit_reconstruction_curves(noise, trajectories, out / "curves" / f"reconstruction_seed{seed}.tsv")

