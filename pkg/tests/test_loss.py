import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from temporal_noise.diffcore import finite_difference_check, ops
from temporal_noise.loss import (
    LossInputError,
    augmented_lagrangian,
    constraint_violation,
    forward_loss_sequence,
    nll_sequence,
    noisy_residuals,
    volume_surrogate,
)
from temporal_noise.model import GruClassifier

Q30 = np.array([[0.7, 0.3], [0.3, 0.7]])


def test_uniform_binary_nll():
    assert nll_sequence(np.full((4, 2), 0.5), [0, 1, 1, 0]).value == pytest.approx(math.log(2), abs=1e-12)


def test_uniform_three_class_nll():
    assert nll_sequence(np.full((3, 3), 1 / 3), [0, 1, 2]).value == pytest.approx(1.098612, abs=1e-6)


def test_one_hot_nll_is_zero():
    probs = np.eye(2)[[0, 1, 1]]
    assert nll_sequence(probs, [0, 1, 1]).value == pytest.approx(0.0, abs=1e-12)


def test_wrong_one_hot_is_clamped():
    value = nll_sequence(np.array([[1.0, 0.0]]), [1]).value
    assert value == pytest.approx(-math.log(1e-12))


def test_nll_shape_mismatch():
    with pytest.raises((LossInputError, ValueError)):
        nll_sequence(np.full((4, 2), 0.5), [0, 1, 1])
    with pytest.raises(LossInputError):
        nll_sequence(np.full((2, 2), 0.5), [0, 2])


def test_forward_loss_hand_example():
    value = forward_loss_sequence(np.array([[0.8, 0.2]]), Q30[None], [0]).value
    assert value == pytest.approx(-math.log(0.62), abs=1e-12)
    assert value == pytest.approx(0.4780, abs=1e-4)


def test_uniform_probs_ignore_noise():
    rng = np.random.default_rng(0)
    traj = np.stack([np.eye(3) * 0.6 + 0.4 / 3] * 5)
    labels = rng.integers(0, 3, 5)
    assert forward_loss_sequence(np.full((5, 3), 1 / 3), traj, labels).value == pytest.approx(math.log(3))


def test_invalid_trajectory_rejected():
    with pytest.raises(LossInputError, match="invalid noise trajectory"):
        forward_loss_sequence(np.full((1, 2), 0.5), np.array([[[0.4, 0.6], [0.3, 0.7]]]), [0])
    with pytest.raises(LossInputError, match="steps"):
        forward_loss_sequence(np.full((3, 2), 0.5), np.stack([Q30] * 2), [0, 0, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(1, 4), st.integers(1, 30))
def test_identity_trajectory_matches_nll_exactly(seed, C, B, T):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(C), size=(B, T))
    labels = rng.integers(0, C, (B, T))
    eye = np.broadcast_to(np.eye(C), (T, C, C))
    fwd = forward_loss_sequence(probs, eye, labels)
    plain = nll_sequence(probs, labels)
    assert fwd.value == plain.value
    assert np.array_equal(fwd.per_time, plain.per_time)


def test_scalar_is_mean_of_breakdown():
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(2), size=(3, 6))
    loss = forward_loss_sequence(probs, np.stack([Q30] * 6), rng.integers(0, 2, (3, 6)))
    assert loss.value == pytest.approx(loss.per_time.mean(), rel=1e-14)
    assert loss.value >= 0


def test_volume_surrogate_examples():
    assert volume_surrogate(np.eye(2)) == pytest.approx(math.sqrt(2))
    assert volume_surrogate(np.full((2, 2), 0.5)) == pytest.approx(1.0)
    sharp, flat = volume_surrogate([[0.9, 0.1], [0.1, 0.9]]), volume_surrogate([[0.6, 0.4], [0.4, 0.6]])
    assert sharp == pytest.approx(1.2806, abs=1e-4) and flat == pytest.approx(1.0198, abs=1e-4)
    assert sharp > flat


def test_constraint_violation_of_uniform_predictor():
    model = GruClassifier.init(3, 2, hidden_dim=4)
    model.params["out_w"][:] = 0.0
    model.params["out_b"][:] = 0.0
    feats = np.random.default_rng(0).normal(size=(5, 6, 3))
    noisy = np.random.default_rng(1).integers(0, 2, (5, 6))
    r = constraint_violation(feats, noisy, model, np.stack([Q30] * 6), t=4)
    assert r == pytest.approx(math.log(2))


def test_residual_vanishes_for_perfect_fit():
    probs = np.array([[[1.0, 0.0]] * 3])
    assert noisy_residuals(probs, np.stack([np.eye(2)] * 3), [[0, 0, 0]]).value == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_residuals_non_negative(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(2), size=(2, 5))
    traj = np.stack([np.array([[1 - r, r], [r, 1 - r]]) for r in rng.uniform(0.01, 0.49, 5)])
    assert (noisy_residuals(probs, traj, rng.integers(0, 2, (2, 5))).value >= 0).all()


def test_lagrangian_without_residual_is_mean_norm():
    probs = np.eye(2)[[0, 1]][None]
    traj = np.stack([np.eye(2)] * 2)
    value = augmented_lagrangian(probs, traj, [[0, 1]], 3.0, 5.0).value
    assert value == pytest.approx(math.sqrt(2), abs=1e-9)


def test_lagrangian_hand_arithmetic():
    # R_t = ln 2 / ... pick a probability so the residual is exactly 0.5 with Q = I
    p = math.exp(-0.5)
    probs = np.array([[[p, 1 - p]] * 3])
    traj = np.stack([np.eye(2)] * 3)
    value = augmented_lagrangian(probs, traj, [[0, 0, 0]], 1.0, 1.0).value
    assert value == pytest.approx(math.sqrt(2) + 0.5 + 0.125, abs=1e-9)
    assert value == pytest.approx(2.0392, abs=1e-4)


def test_lagrangian_increases_with_penalty():
    rng = np.random.default_rng(2)
    probs = rng.dirichlet(np.ones(2), size=(2, 4))
    traj, labels = np.stack([Q30] * 4), rng.integers(0, 2, (2, 4))
    values = [augmented_lagrangian(probs, traj, labels, 1.0, c).value for c in (0.5, 1.0, 4.0)]
    assert values[0] < values[1] < values[2]


def test_lagrangian_argument_checks():
    with pytest.raises(LossInputError):
        augmented_lagrangian(np.full((1, 2), 0.5), Q30[None], [0], math.inf, 1.0)
    with pytest.raises(LossInputError):
        augmented_lagrangian(np.full((1, 2), 0.5), Q30[None], [0], 1.0, 0.0)


def test_forward_loss_gradients_wrt_probs_and_noise():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(2, 3, 2))
    labels = rng.integers(0, 2, (2, 3))
    raw = rng.normal(size=(3, 2, 2))

    def loss(p):
        probs = ops.softmax(p["logits"])
        q = ops.mul(ops.add(ops.softmax(p["raw"]), np.eye(2)), 0.5)
        return forward_loss_sequence(probs, q, labels).node

    assert finite_difference_check(loss, {"logits": logits, "raw": raw}) < 1e-4


def test_lagrangian_gradient():
    rng = np.random.default_rng(10)
    labels = rng.integers(0, 2, (2, 3))

    def loss(p):
        probs = ops.softmax(p["logits"])
        q = ops.mul(ops.add(ops.softmax(p["raw"]), np.eye(2)), 0.5)
        return augmented_lagrangian(probs, q, labels, 1.7, 3.0).node

    assert finite_difference_check(loss, {"logits": rng.normal(size=(2, 3, 2)),
                                          "raw": rng.normal(size=(3, 2, 2))}) < 1e-4
