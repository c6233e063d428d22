"""Ten-seed desk experiments behind the comparative estimator examples."""

import warnings

import pytest

from temporal_noise.bench import ExperimentConfig, run_experiment

pytestmark = pytest.mark.experiment

DESK_TRAIN = {"epochs": 30, "batch_size": 64, "warmup_epochs": 10, "outer_iterations": 6, "inner_epochs": 5}


def ten_seeds(noise, estimators, out):
    config = ExperimentConfig.from_dict({
        "dataset": {"generator": "hmm", "n": 1000, "d": 10, "T": 50, "C": 2, "variance": 1.5},
        "noise": noise,
        "estimators": estimators,
        "seeds": list(range(10)),
        "train": DESK_TRAIN,
        "out": str(out),
    })
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = run_experiment(config, write=False)
    assert not report.failures
    return report


def test_ignore_trails_oracle_on_static_noise(tmp_path):
    report = ten_seeds({"regime": "static", "mean": 0.3}, ["ignore", "oracle"], tmp_path)
    ignore, oracle = report.mean("ignore"), report.mean("oracle")
    print(f"static 30%: ignore {ignore:.2f}% oracle {oracle:.2f}%")
    assert ignore - oracle >= 3.0


def test_plugin_beats_anchor_on_mixed_noise(tmp_path):
    report = ten_seeds({"regime": "mixed", "mean": 0.3}, ["plugin", "anchor"], tmp_path)
    plugin, anchor = (report.mean(e, "approx_error") for e in ("plugin", "anchor"))
    print(f"mixed: plugin approx {plugin:.2f}% anchor approx {anchor:.2f}%")
    assert plugin < anchor
