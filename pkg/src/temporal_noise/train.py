"""Training procedures: noise-ignoring, oracle-corrected, static and temporal estimators.

Every estimator reads only ``features`` and ``noisy_labels`` from its training
set. All randomness (initialization, batch order) comes from one generator
seeded by ``TrainConfig.seed``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import SequenceDataset
from .diffcore import AdamState, Tape, Tensor, adam_step, backpropagate, ops
from .loss import LossValue, augmented_lagrangian, forward_loss_sequence, nll_sequence, noisy_residuals
from .model import (
    ContinuousNoiseNet,
    DiscontinuousNoiseParams,
    GruClassifier,
    forward_sequence,
    gru_probs,
    noise_net_tensor,
    stochastic_from_raw,
)
from .noise import NoiseFunctionSpec, average_noise, sample_trajectory, validate_trajectory

log = logging.getLogger(__name__)

ESTIMATORS = ("ignore", "oracle", "oracle_static", "anchor", "volmin", "plugin", "discontinuous", "continuous")
RATIO_TESTS = ("sufficient_decrease", "literal")
PRECISIONS = ("float32", "float64")


class TrainConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class AnchorWarning(UserWarning):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float = 0.01
    batch_size: int = 64
    seed: int = 0
    hidden_dim: int = 32
    # static VolMin and Discontinuous
    vol_lambda: float = 1e-4
    # Anchor and Plug-In
    warmup_epochs: int = 25
    anchor_percentile: float = 97.0
    min_anchor_candidates: int = 20
    # Continuous (augmented Lagrangian)
    outer_iterations: int = 15
    inner_epochs: int = 10
    lagrange_init: float = 1.0
    penalty_init: float = 1.0
    gamma: float = 2.0
    eta: float = 2.0
    ratio_test: str = "sufficient_decrease"
    noise_net_depth: int = 4
    noise_net_width: int = 32
    # arithmetic of the GRU recurrence during training; evaluation always runs in float64
    precision: str = "float32"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "hidden_dim", "outer_iterations", "inner_epochs",
                     "noise_net_depth", "noise_net_width"):
            if getattr(self, name) <= 0:
                raise TrainConfigError(f"{name} must be positive")
        for name in ("lr", "lagrange_init", "penalty_init", "gamma", "eta"):
            if not getattr(self, name) > 0:
                raise TrainConfigError(f"{name} must be positive")
        if self.vol_lambda < 0 or self.warmup_epochs < 0:
            raise TrainConfigError("vol_lambda and warmup_epochs must be non-negative")
        if not 0 < self.anchor_percentile <= 100:
            raise TrainConfigError("anchor_percentile must lie in (0, 100]")
        if self.ratio_test not in RATIO_TESTS:
            raise TrainConfigError(f"ratio_test must be one of {RATIO_TESTS}")
        if self.precision not in PRECISIONS:
            raise TrainConfigError(f"precision must be one of {PRECISIONS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    estimator: str
    classifier: GruClassifier
    trajectory: Optional[np.ndarray] = None  # (T, C, C)
    curve: list[dict] = field(default_factory=list)
    noise_params: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def _require_noisy(train: SequenceDataset) -> None:
    if train.noisy_labels is None:
        raise TrainConfigError("training set has no noisy labels")


LossFn = Callable[[dict, np.ndarray, np.ndarray], LossValue]


def _fit(params: dict[str, np.ndarray], loss_fn: LossFn, train: SequenceDataset, config: TrainConfig,
         epochs: int, rng: np.random.Generator, curve: list[dict], stage: str,
         adam: Optional[AdamState] = None, context: Optional[dict] = None) -> dict[str, np.ndarray]:
    """Mini-batch Adam over whole sequences; returns the final parameters."""
    adam = adam if adam is not None else AdamState(lr=config.lr)
    x, y = train.features, train.noisy_labels
    n = train.n
    for _ in range(epochs):
        order = rng.permutation(n)
        total, fit, count = 0.0, 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = Tape()
            nodes = {k: tape.parameter(v, name=k) for k, v in params.items()}
            loss = loss_fn(nodes, x[idx], y[idx])
            if not math.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"non-finite loss in stage {stage!r} at epoch {len(curve) + 1}"
                    + (f" ({context})" if context else ""))
            grads = backpropagate(tape, loss.node)
            params = adam_step(adam, params, {k: grads[nodes[k]] for k in params})
            total += loss.value * len(idx)
            fit += (loss.value if loss.fit is None else loss.fit) * len(idx)
            count += len(idx)
        # "loss" is the (noisy-label) data fit; "objective" adds any regularizer or penalty terms
        entry = {"epoch": len(curve) + 1, "stage": stage, "loss": fit / count, "objective": total / count}
        if context:
            entry.update(context)
        curve.append(entry)
    return params


def _classifier_params(train: SequenceDataset, config: TrainConfig, rng) -> GruClassifier:
    return GruClassifier.init(train.dim, train.num_classes, config.hidden_dim, rng)


def _split_params(params: dict, template: GruClassifier) -> GruClassifier:
    gru = {k: params[k] for k in template.params}
    return GruClassifier(template.input_dim, template.num_classes, template.hidden_dim, gru)


def _nll_loss(config: TrainConfig) -> LossFn:
    def loss_fn(nodes, xb, yb) -> LossValue:
        return nll_sequence(gru_probs(nodes, xb, config.precision), yb)
    return loss_fn


def _fit_forward(train, config, rng, traj: np.ndarray, curve, stage="forward") -> GruClassifier:
    model = _classifier_params(train, config, rng)
    report = validate_trajectory(traj)
    if not report.ok:
        raise TrainConfigError("invalid noise trajectory: " + "; ".join(report.violations[:3]))
    q = Tensor(traj)

    def loss_fn(nodes, xb, yb):
        return forward_loss_sequence(gru_probs(nodes, xb, config.precision), q, yb)

    params = _fit(model.params, loss_fn, train, config, config.epochs, rng, curve, stage)
    return _split_params(params, model)


def train_ignore(train: SequenceDataset, config: TrainConfig) -> TrainedModel:
    """Plain NLL on the noisy labels."""
    _require_noisy(train)
    rng = np.random.default_rng(config.seed)
    model = _classifier_params(train, config, rng)
    curve: list[dict] = []
    params = _fit(model.params, _nll_loss(config), train, config, config.epochs, rng, curve, "nll")
    return TrainedModel("ignore", _split_params(params, model), None, curve)


def train_oracle_q(train: SequenceDataset, noise, config: TrainConfig, static: bool = False) -> TrainedModel:
    """Forward-corrected training with a known noise function.

    ``noise`` is a NoiseFunctionSpec or a (T, C, C) trajectory. With
    ``static=True`` the time-averaged matrix is used at every step.
    """
    _require_noisy(train)
    traj = sample_trajectory(noise) if isinstance(noise, NoiseFunctionSpec) else np.asarray(noise, dtype=float)
    if traj.shape != (train.horizon, train.num_classes, train.num_classes):
        raise TrainConfigError(f"noise trajectory shape {traj.shape} does not match the dataset")
    if static:
        traj = np.broadcast_to(average_noise(traj), traj.shape).copy()
    rng = np.random.default_rng(config.seed)
    curve: list[dict] = []
    clf = _fit_forward(train, config, rng, traj, curve)
    return TrainedModel("oracle_static" if static else "oracle", clf, traj, curve)


# ---------------------------------------------------------------- anchor points


def repair_dominance(row: np.ndarray, i: int, margin: float = 0.01) -> np.ndarray:
    """Blend a row toward e_i by the smallest amount giving row[i] >= max(others) + margin."""
    row = np.asarray(row, dtype=np.float64)
    row = row / row.sum()
    others = np.delete(row, i)
    if others.size == 0:
        return row
    m = others.max()
    if row[i] >= m + margin:
        return row
    beta = (margin + m - row[i]) / (1.0 - row[i] + m)
    out = (1.0 - beta) * row
    out[i] += beta
    return out


def _anchor_row(probs: np.ndarray, i: int, percentile: float) -> np.ndarray:
    """Row of the instance whose p(noisy = i) sits at the given percentile; probs is (m, C)."""
    scores = probs[:, i]
    level = np.percentile(scores, percentile, method="linear")
    k = int(np.argmin(np.abs(scores - level)))
    return probs[k]


def anchor_matrix(probs: np.ndarray, percentile: float = 97.0) -> np.ndarray:
    """Static anchor estimate pooled over all (sequence, step) pairs; probs is (n, T, C)."""
    C = probs.shape[-1]
    flat = probs.reshape(-1, C)
    q = np.empty((C, C))
    for i in range(C):
        if flat[:, i].max() < 1.0 / C + 0.05:
            warnings.warn(f"class {i + 1}: no candidate anchor points; using the identity row", AnchorWarning)
            q[i] = np.eye(C)[i]
            continue
        q[i] = repair_dominance(_anchor_row(flat, i, percentile), i)
    return q


def plugin_trajectory(probs: np.ndarray, percentile: float = 97.0, min_candidates: int = 20) -> np.ndarray:
    """Per-step anchor estimates Q(t); probs is (n, T, C) from a noisy-posterior model."""
    n, T, C = probs.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AnchorWarning)
        pooled = anchor_matrix(probs, percentile)
    traj = np.empty((T, C, C))
    predicted = probs.argmax(axis=-1)
    sparse = []
    for t in range(T):
        for i in range(C):
            if (predicted[:, t] == i).sum() < min_candidates:
                sparse.append((t + 1, i + 1))
                traj[t, i] = pooled[i]
            else:
                traj[t, i] = repair_dominance(_anchor_row(probs[:, t], i, percentile), i)
    if sparse:
        warnings.warn(f"{len(sparse)} (t, class) cells had fewer than {min_candidates} anchor candidates; "
                      "used the time-pooled estimate there", AnchorWarning)
    return traj


def _warmup_probs(train, config, rng, curve) -> np.ndarray:
    model = _classifier_params(train, config, rng)
    params = _fit(model.params, _nll_loss(config), train, config, config.warmup_epochs, rng, curve, "warmup")
    return forward_sequence(_split_params(params, model), train.features)


def train_static_anchor(train: SequenceDataset, config: TrainConfig) -> TrainedModel:
    _require_noisy(train)
    rng = np.random.default_rng(config.seed)
    curve: list[dict] = []
    probs = _warmup_probs(train, config, rng, curve)
    q = anchor_matrix(probs, config.anchor_percentile)
    traj = np.broadcast_to(q, (train.horizon,) + q.shape).copy()
    clf = _fit_forward(train, config, rng, traj, curve)
    return TrainedModel("anchor", clf, traj, curve)


def train_plugin(train: SequenceDataset, config: TrainConfig) -> TrainedModel:
    _require_noisy(train)
    rng = np.random.default_rng(config.seed)
    curve: list[dict] = []
    probs = _warmup_probs(train, config, rng, curve)
    traj = plugin_trajectory(probs, config.anchor_percentile, config.min_anchor_candidates)
    clf = _fit_forward(train, config, rng, traj, curve)
    return TrainedModel("plugin", clf, traj, curve)


# ------------------------------------------------------------ learned noise


def train_static_volmin(train: SequenceDataset, config: TrainConfig) -> TrainedModel:
    """Joint fit of the classifier and one matrix: forward NLL + vol_lambda * ||Q||_F."""
    _require_noisy(train)
    rng = np.random.default_rng(config.seed)
    model = _classifier_params(train, config, rng)
    C, T = train.num_classes, train.horizon
    params = dict(model.params, q_raw=np.zeros((C, C)))

    def loss_fn(nodes, xb, yb):
        q = stochastic_from_raw(nodes["q_raw"])
        fit = forward_loss_sequence(gru_probs(nodes, xb, config.precision), ops.repeat_leading(q, T), yb)
        total = ops.add(fit.node, ops.mul(ops.frobenius(q), config.vol_lambda))
        return LossValue(total, fit.per_time, fit=fit.value)

    curve: list[dict] = []
    params = _fit(params, loss_fn, train, config, config.epochs, rng, curve, "volmin")
    q = stochastic_from_raw(params["q_raw"]).value
    traj = np.broadcast_to(q, (T, C, C)).copy()
    return TrainedModel("volmin", _split_params(params, model), traj, curve, {"q_raw": params["q_raw"]})


def train_discontinuous(train: SequenceDataset, config: TrainConfig) -> TrainedModel:
    """Independent raw block per step: forward NLL + vol_lambda * mean_t ||Q_t||_F."""
    _require_noisy(train)
    rng = np.random.default_rng(config.seed)
    model = _classifier_params(train, config, rng)
    blocks = DiscontinuousNoiseParams.zeros(train.num_classes, train.horizon).blocks
    params = dict(model.params, q_blocks=blocks)

    def loss_fn(nodes, xb, yb):
        q = stochastic_from_raw(nodes["q_blocks"])
        fit = forward_loss_sequence(gru_probs(nodes, xb, config.precision), q, yb)
        total = ops.add(fit.node, ops.mul(ops.mean(ops.frobenius(q)), config.vol_lambda))
        return LossValue(total, fit.per_time, fit=fit.value)

    curve: list[dict] = []
    params = _fit(params, loss_fn, train, config, config.epochs, rng, curve, "discontinuous")
    traj = DiscontinuousNoiseParams(params["q_blocks"]).trajectory()
    return TrainedModel("discontinuous", _split_params(params, model), traj, curve,
                        {"q_blocks": params["q_blocks"]})


def update_multipliers(lagrange: float, penalty: float, residual: float, previous: Optional[float],
                       gamma: float = 2.0, eta: float = 2.0,
                       ratio_test: str = "sufficient_decrease") -> tuple[float, float]:
    """One outer-iteration update of (multiplier, penalty) from the mean residual.

    The multiplier always moves by penalty * residual. The penalty grows by
    ``eta`` when the residual failed to shrink enough: below previous / gamma
    for "sufficient_decrease", or rose above gamma * previous for "literal".
    """
    new_lagrange = lagrange + penalty * residual
    if previous is None:
        return new_lagrange, penalty
    if ratio_test == "literal":
        stalled = residual > gamma * previous
    else:
        stalled = residual > previous / gamma
    return new_lagrange, penalty * eta if stalled else penalty


def mean_residual(classifier: GruClassifier, traj: np.ndarray, train: SequenceDataset) -> float:
    probs = forward_sequence(classifier, train.features)
    return float(noisy_residuals(probs, traj, train.noisy_labels).value.mean())


def train_continuous(train: SequenceDataset, config: TrainConfig) -> TrainedModel:
    """Joint classifier / noise-network fit by the augmented Lagrangian method."""
    _require_noisy(train)
    if config.epochs != config.outer_iterations * config.inner_epochs:
        raise TrainConfigError(
            f"epochs ({config.epochs}) must equal outer_iterations * inner_epochs "
            f"({config.outer_iterations} * {config.inner_epochs})")
    rng = np.random.default_rng(config.seed)
    model = _classifier_params(train, config, rng)
    C, T = train.num_classes, train.horizon
    net = ContinuousNoiseNet.init(C, T, config.noise_net_depth, config.noise_net_width, rng)
    params = dict(model.params, **net.params)
    lagrange, penalty = config.lagrange_init, config.penalty_init
    previous = None
    history = []
    curve: list[dict] = []
    adam = AdamState(lr=config.lr)
    for k in range(1, config.outer_iterations + 1):
        lam, c = lagrange, penalty

        def loss_fn(nodes, xb, yb):
            q = noise_net_tensor(nodes, T, C)
            return augmented_lagrangian(gru_probs(nodes, xb, config.precision), q, yb, lam, c)

        context = {"outer": k, "lagrange": lam, "penalty": c}
        params = _fit(params, loss_fn, train, config, config.inner_epochs, rng, curve, "continuous",
                      adam=adam, context=context)
        clf = _split_params(params, model)
        traj = noise_net_tensor(params, T, C).value
        residual = mean_residual(clf, traj, train)
        if not math.isfinite(residual):
            raise TrainingDivergedError(f"non-finite residual after outer iteration {k} ({context})")
        lagrange, penalty = update_multipliers(lam, c, residual, previous, config.gamma, config.eta,
                                               config.ratio_test)
        history.append({"outer": k, "residual": residual, "lagrange": lagrange, "penalty": penalty})
        curve[-1]["outer_residual"] = residual
        log.debug("continuous outer %d: R=%.5f lambda=%.4g c=%.4g", k, residual, lagrange, penalty)
        previous = residual
        if residual == 0.0:  # unreachable for NLL residuals; kept for parity with the algorithm
            break
    net_params = {k: v for k, v in params.items() if k.startswith("net_")}
    traj = noise_net_tensor(net_params, T, C).value
    return TrainedModel("continuous", _split_params(params, model), traj, curve, net_params,
                        {"multipliers": history, "ratio_test": config.ratio_test,
                         "noise_net_depth": config.noise_net_depth})


def train_estimator(name: str, train: SequenceDataset, config: TrainConfig,
                    noise: Optional[NoiseFunctionSpec] = None) -> TrainedModel:
    if name in ("oracle", "oracle_static"):
        if noise is None:
            raise TrainConfigError(f"{name} needs the true noise function")
        return train_oracle_q(train, noise, config, static=name == "oracle_static")
    fns = {"ignore": train_ignore, "anchor": train_static_anchor, "volmin": train_static_volmin,
           "plugin": train_plugin, "discontinuous": train_discontinuous, "continuous": train_continuous}
    if name not in fns:
        raise TrainConfigError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    trained = fns[name](train, config)
    if trained.trajectory is not None:
        report = validate_trajectory(trained.trajectory)
        if not report.ok:
            raise TrainingDivergedError(f"{name} produced an invalid trajectory: {report.violations[:3]}")
    return trained
