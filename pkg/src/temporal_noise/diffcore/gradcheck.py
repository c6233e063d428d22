"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Mapping, Union

import numpy as np

from .tensor import Tape, Tensor, backpropagate

Params = Union[np.ndarray, Mapping[str, np.ndarray]]


def relative_error(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def finite_difference_check(fn: Callable, params: Params, step: float = 1e-5) -> float:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives a Tensor (or a dict of Tensors when ``params`` is a dict)
    and returns a scalar Tensor. Returns the max over all coordinates of
    |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(params, np.ndarray) or np.isscalar(params)
    arrays = {"x": np.asarray(params, dtype=np.float64)} if single else \
        {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def call(values: dict) -> Tensor:
        return fn(values["x"]) if single else fn(values)

    tape = Tape()
    nodes = {k: tape.parameter(v, name=k) for k, v in arrays.items()}
    grads = backpropagate(tape, call(nodes))

    worst = 0.0
    for name, value in arrays.items():
        def scalar(v, name=name):
            consts = {k: Tensor(v if k == name else arrays[k]) for k in arrays}
            return float(call(consts).value)
        numeric = numeric_gradient(scalar, value, step)
        worst = max(worst, relative_error(grads[nodes[name]], numeric))
    return worst
