"""Temporal label-noise functions.

A noise function maps a time step ``t`` to a C x C row-stochastic matrix whose
entry (i, j) is the probability of observing label j when the clean label is
i. Trajectories are plain float arrays of shape (T, C, C); single matrices are
(C, C) arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

FLIP_FLOOR = 0.01
FLIP_CEIL = 0.49
FAMILIES = ("static", "linear", "decay", "growth", "periodic", "mixed")

_CURVE_PARAMS = {
    "static": {"rho": 0.3},
    "linear": {"rho_start": 0.4, "rho_end": 0.2},
    "decay": {"a": 0.4, "b": 0.05, "offset": 0.0},
    "growth": {"a": 0.4, "b": 0.2, "gamma": 25.0, "offset": 0.0},
    "periodic": {"offset": 0.5, "amplitude": 0.5, "alpha": 1.0, "phi": 0.0},
}


class NoiseSpecError(ValueError):
    pass


@dataclass(frozen=True)
class RateCurve:
    """Scalar flip-probability curve rho(t) for one clean class."""

    family: str
    params: Mapping[str, float]
    horizon: int

    def __post_init__(self):
        if self.family not in _CURVE_PARAMS:
            raise NoiseSpecError(f"unknown curve family {self.family!r}")
        unknown = set(self.params) - set(_CURVE_PARAMS[self.family])
        if unknown:
            raise NoiseSpecError(f"{self.family}: unknown parameters {sorted(unknown)}")

    def p(self, key: str) -> float:
        return float(self.params.get(key, _CURVE_PARAMS[self.family][key]))

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        f = self.family
        if f == "static":
            return np.full_like(t, self.p("rho"))
        if f == "linear":
            frac = (t - 1.0) / max(self.horizon - 1, 1)
            return self.p("rho_start") + (self.p("rho_end") - self.p("rho_start")) * frac
        if f == "decay":
            return self.p("offset") + self.p("a") * np.exp(-self.p("b") * t)
        if f == "growth":
            return self.p("offset") + self.p("a") / (1.0 + np.exp(-self.p("b") * (t - self.p("gamma"))))
        return self.p("offset") + self.p("amplitude") * np.sin(self.p("alpha") * t + self.p("phi"))


@dataclass(frozen=True)
class NoiseFunctionSpec:
    """A parametric temporal noise function.

    ``params`` is the flat parameter map of the family. For ``mixed`` the keys
    are prefixed: ``growth_*`` drives row 0, ``decay_*`` drives row 1 and
    ``rho`` any further rows. ``periodic`` also accepts ``phase_step``: row i
    is shifted to phase ``phi + i * phase_step``. ``rows`` optionally replaces the curve of
    individual clean classes: ``{i: {"family": ..., **params}}``.
    """

    family: str
    num_classes: int
    horizon: int
    params: Mapping[str, float] = field(default_factory=dict)
    rows: Mapping[int, Mapping] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise NoiseSpecError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.num_classes < 2:
            raise NoiseSpecError("need at least 2 classes")
        if self.horizon < 1:
            raise NoiseSpecError("horizon must be a positive integer")
        self.curves()  # validates parameter names

    def curves(self) -> list[RateCurve]:
        C, T = self.num_classes, self.horizon
        if self.family == "mixed":
            grab = lambda prefix: {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
            extra = set(self.params) - {k for k in self.params if k.startswith(("growth_", "decay_"))} - {"rho"}
            if extra:
                raise NoiseSpecError(f"mixed: unknown parameters {sorted(extra)}")
            out = [RateCurve("growth", grab("growth_"), T), RateCurve("decay", grab("decay_"), T)]
            rho = {"rho": self.params["rho"]} if "rho" in self.params else {}
            out += [RateCurve("static", rho, T) for _ in range(C - 2)]
        elif self.family == "periodic":
            base = {k: v for k, v in self.params.items() if k != "phase_step"}
            step = float(self.params.get("phase_step", 0.0))
            phi = float(base.get("phi", _CURVE_PARAMS["periodic"]["phi"]))
            out = [RateCurve("periodic", dict(base, phi=phi + i * step), T) for i in range(C)]
        else:
            out = [RateCurve(self.family, dict(self.params), T) for _ in range(C)]
        for i, row in self.rows.items():
            i = int(i)
            if not 0 <= i < C:
                raise NoiseSpecError(f"row override for class {i} outside [0, {C})")
            row = dict(row)
            out[i] = RateCurve(row.pop("family"), row, T)
        return out

    def to_dict(self) -> dict:
        d = {"family": self.family, "num_classes": self.num_classes, "horizon": self.horizon,
             "params": {k: float(v) for k, v in sorted(self.params.items())}}
        if self.rows:
            d["rows"] = {str(k): dict(v) for k, v in sorted(self.rows.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseFunctionSpec":
        rows = {int(k): dict(v) for k, v in (d.get("rows") or {}).items()}
        return cls(family=d["family"], num_classes=int(d["num_classes"]), horizon=int(d["horizon"]),
                   params={k: float(v) for k, v in (d.get("params") or {}).items()}, rows=rows)


_warned_clamp = False


def flip_rates(spec: NoiseFunctionSpec, t) -> np.ndarray:
    """Raw (unclamped) per-row flip probabilities; shape (..., C) for array ``t``."""
    t = np.asarray(t, dtype=np.float64)
    return np.stack([np.broadcast_to(c(t), t.shape) for c in spec.curves()], axis=-1)


def _clamped(spec: NoiseFunctionSpec, t) -> np.ndarray:
    global _warned_clamp
    raw = flip_rates(spec, t)
    rates = np.clip(raw, FLIP_FLOOR, FLIP_CEIL)
    if not _warned_clamp and np.any(rates != raw):
        _warned_clamp = True
        warnings.warn(f"flip probabilities clamped to [{FLIP_FLOOR}, {FLIP_CEIL}]", RuntimeWarning,
                      stacklevel=3)
    return rates


def _matrices(rates: np.ndarray) -> np.ndarray:
    C = rates.shape[-1]
    eye = np.eye(C)
    off = (rates / (C - 1))[..., :, None] * (1.0 - eye)
    return off + (1.0 - rates)[..., :, None] * eye


def eval_noise(spec: NoiseFunctionSpec, t: float) -> np.ndarray:
    """Q_t for one time step; t = 0 evaluates the family at its origin."""
    if not 0 <= t <= spec.horizon:
        raise NoiseSpecError(f"t={t} outside [1, {spec.horizon}]")
    return _matrices(_clamped(spec, float(t)))


def sample_trajectory(spec: NoiseFunctionSpec) -> np.ndarray:
    """Tabulate Q_t for t = 1..T; returns (T, C, C)."""
    return _matrices(_clamped(spec, np.arange(1, spec.horizon + 1)))


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_matrix(q, tol: float = 1e-9) -> ValidationReport:
    """Check that ``q`` is entrywise in [0, 1], row-stochastic and diagonally dominant."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        return ValidationReport([f"not a square matrix: shape {q.shape}"])
    problems = []
    if not np.all(np.isfinite(q)):
        problems.append("non-finite entries")
    for i, j in zip(*np.nonzero((q < 0) | (q > 1))):
        problems.append(f"entry ({i}, {j}) = {q[i, j]:.6g} outside [0, 1]")
    for i, s in enumerate(q.sum(axis=1)):
        if abs(s - 1.0) > tol:
            problems.append(f"row {i} sums to {s:.12g}, not 1")
    for i in range(q.shape[0]):
        others = np.delete(q[i], i)
        if others.size and not q[i, i] > others.max():
            problems.append(f"row {i} not diagonally dominant")
    return ValidationReport(problems)


def validate_trajectory(traj) -> ValidationReport:
    traj = np.asarray(traj)
    problems = []
    for t, q in enumerate(traj, start=1):
        problems += [f"t={t}: {v}" for v in validate_matrix(q).violations]
    return ValidationReport(problems)


def corrupt_labels(dataset, spec: NoiseFunctionSpec, seed: int = 0):
    """Return a copy of ``dataset`` whose noisy labels are drawn from Q_t[clean_t]."""
    if spec.num_classes != dataset.num_classes:
        raise NoiseSpecError(f"noise spec has {spec.num_classes} classes, dataset {dataset.num_classes}")
    if spec.horizon != dataset.horizon:
        raise NoiseSpecError(f"noise spec horizon {spec.horizon} != dataset horizon {dataset.horizon}")
    noisy = draw_noisy_labels(dataset.clean_labels, sample_trajectory(spec), np.random.default_rng(seed))
    meta = dict(dataset.provenance, noise=spec.to_dict(), noise_seed=seed)
    return dataset.replace(noisy_labels=noisy, provenance=meta)


def draw_noisy_labels(clean: np.ndarray, traj: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.int64)
    n, T = clean.shape
    rows = traj[np.arange(T)[None, :], clean]  # (n, T, C)
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random((n, T, 1))
    return np.minimum((u >= cdf).sum(axis=-1), traj.shape[-1] - 1)


def average_noise(spec_or_traj) -> np.ndarray:
    """Time-averaged noise matrix with rows renormalized."""
    traj = sample_trajectory(spec_or_traj) if isinstance(spec_or_traj, NoiseFunctionSpec) \
        else np.asarray(spec_or_traj)
    q = traj.mean(axis=0)
    return q / q.sum(axis=1, keepdims=True)


def approximation_error(truth, estimate) -> float:
    """Time-averaged entrywise mean absolute error between two trajectories."""
    truth, estimate = np.asarray(truth, dtype=np.float64), np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape or truth.ndim != 3:
        raise NoiseSpecError(f"trajectory shapes differ: {truth.shape} vs {estimate.shape}")
    return float(np.abs(truth - estimate).mean())


def regime(name: str, num_classes: int = 2, horizon: int = 50, mean: float = 0.3,
           amplitude: float = 0.2, periods: int = 2) -> NoiseFunctionSpec:
    """Preset for one of the six benchmark regimes with time-averaged flip rate ``mean``.

    Offsets are solved so the unclamped rate averages to ``mean`` over t = 1..T.
    The periodic preset staggers the phase of each clean class by 2*pi/C, so at
    any one step the classes are corrupted at different rates.
    """
    T = horizon
    t = np.arange(1, T + 1, dtype=np.float64)
    if name == "static":
        params = {"rho": mean}
    elif name == "linear":
        params = {"rho_start": mean + 0.1, "rho_end": mean - 0.1}
    elif name == "decay":
        params = _decay_params(t, T, mean)
    elif name == "growth":
        params = _growth_params(t, T, mean)
    elif name == "periodic":
        params = {"offset": mean, "amplitude": amplitude, "alpha": 2.0 * math.pi * periods / T, "phi": 0.0,
                  "phase_step": 2.0 * math.pi / num_classes}
    elif name == "mixed":
        params = {f"growth_{k}": v for k, v in _growth_params(t, T, mean).items()}
        params.update({f"decay_{k}": v for k, v in _decay_params(t, T, mean).items()})
        if num_classes > 2:
            params["rho"] = mean
    else:
        raise NoiseSpecError(f"unknown regime {name!r}; expected one of {FAMILIES}")
    return NoiseFunctionSpec(name, num_classes, horizon, params)


def _decay_params(t, T, mean):
    a, b = 0.25, 5.0 / T
    return {"a": a, "b": b, "offset": mean - float(np.mean(a * np.exp(-b * t)))}


def _growth_params(t, T, mean):
    a, b, gamma = 0.3, 10.0 / T, T / 2.0
    shape = a / (1.0 + np.exp(-b * (t - gamma)))
    return {"a": a, "b": b, "gamma": gamma, "offset": mean - float(np.mean(shape))}
