"""Sequence losses: NLL, forward-corrected NLL and the augmented Lagrangian.

All losses average over time steps and over the sequences of a batch.
Probabilities may be a single sequence (T, C) or a batch (B, T, C); noise
trajectories are (T, C, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor, ops
from .noise import validate_trajectory


class LossInputError(ValueError):
    pass


@dataclass
class LossValue:
    node: Tensor  # scalar, differentiable when inputs are on a tape
    per_time: np.ndarray  # (T,) batch-averaged contribution of each step
    fit: float | None = None  # data-fit part when the objective carries extra terms

    @property
    def value(self) -> float:
        return float(self.node.value)

    def __float__(self) -> float:
        return self.value


def _batched(probs) -> Tensor:
    probs = as_tensor(probs)
    if probs.value.ndim == 2:
        probs = ops.reshape(probs, (1,) + probs.shape)
    if probs.value.ndim != 3:
        raise LossInputError(f"probabilities must be (T, C) or (B, T, C), got {probs.shape}")
    return probs


def _labels(labels, probs: Tensor) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(probs.shape[:2])
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[2]):
        raise LossInputError("labels outside the class range")
    return labels


def _nll(probs: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    try:
        picked = ops.pick(probs, labels)
    except ValueError as exc:
        raise LossInputError(str(exc)) from None
    per_time = ops.mean(ops.mul(ops.log(picked), -1.0), axis=0)
    return per_time, ops.mean(per_time)


def nll_sequence(probs, labels) -> LossValue:
    probs = _batched(probs)
    per_time, total = _nll(probs, _labels(labels, probs))
    return LossValue(total, per_time.value)


def _trajectory(traj, horizon: int) -> Tensor:
    if not isinstance(traj, Tensor):
        traj = np.asarray(traj, dtype=np.float64)
        if traj.ndim != 3 or traj.shape[0] != horizon:
            raise LossInputError(f"trajectory shape {traj.shape} does not cover {horizon} steps")
        report = validate_trajectory(traj)
        if not report.ok:
            raise LossInputError("invalid noise trajectory: " + "; ".join(report.violations[:3]))
    return as_tensor(traj)


def noisy_residuals(probs, traj, noisy_labels) -> Tensor:
    """Per-step forward NLL R_t (batch-averaged), shape (T,)."""
    probs = _batched(probs)
    q = _trajectory(traj, probs.shape[1])
    try:
        noisy = ops.noisy_posterior(probs, q)
    except ValueError as exc:
        raise LossInputError(str(exc)) from None
    per_time, _ = _nll(noisy, _labels(noisy_labels, probs))
    return per_time


def forward_loss_sequence(probs, traj, noisy_labels) -> LossValue:
    """(1/T) sum_t -log((Q_t^T p_t)[noisy_t]), averaged over the batch."""
    per_time = noisy_residuals(probs, traj, noisy_labels)
    return LossValue(ops.mean(per_time), per_time.value)


def volume_surrogate(q) -> float:
    """Frobenius norm; a convex stand-in for the volume of the simplex spanned by Q's rows."""
    return float(ops.frobenius(np.asarray(q, dtype=np.float64)).value)


def augmented_lagrangian(probs, traj, noisy_labels, lagrange: float, penalty: float) -> LossValue:
    """(1/T) sum_t [ ||Q_t||_F + lagrange * R_t + penalty / 2 * R_t^2 ]."""
    if not np.isfinite(lagrange):
        raise LossInputError("Lagrange multiplier must be finite")
    if penalty <= 0:
        raise LossInputError("penalty must be positive")
    residual = noisy_residuals(probs, traj, noisy_labels)
    fro = ops.frobenius(traj)
    terms = ops.add(ops.add(fro, ops.mul(residual, lagrange)),
                    ops.mul(ops.mul(residual, residual), 0.5 * penalty))
    return LossValue(ops.mean(terms), terms.value, fit=float(residual.value.mean()))


def constraint_violation(features, noisy_labels, classifier, noise, t: int) -> float:
    """R_t for one (1-based) step: mean forward NLL over the given sequences at t.

    ``noise`` is anything with a ``trajectory()`` method or a (T, C, C) array.
    """
    from .model import forward_sequence

    traj = noise.trajectory() if hasattr(noise, "trajectory") else np.asarray(noise)
    probs = forward_sequence(classifier, np.asarray(features))
    probs = probs[None] if probs.ndim == 2 else probs
    r = noisy_residuals(probs, traj, noisy_labels).value
    return float(r[t - 1])
