"""GRU sequence classifier and trainable noise-function parameterizations.

Parameters live in plain ``dict[str, np.ndarray]`` so the optimizer and the
checkpoint format can treat every model the same way. The ``*_tensor``
functions take a dict whose values are tape Tensors (or arrays) and build the
differentiable forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .diffcore import Tensor, as_tensor, ops


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# Softmax mass floor. Without it a saturated softmax underflows the diagonal to
# exactly 0.5 and ties an off-diagonal entry, losing strict dominance.
SOFTMAX_FLOOR = 1e-6


def stochastic_from_raw(raw) -> Tensor:
    """(softmax(raw) + I) / rowsum over the last two axes.

    Every row of softmax(raw) + I sums to exactly 2, so the rescale is a halving.
    The softmax is mixed with SOFTMAX_FLOOR of uniform mass first, which leaves
    a zero raw block unchanged.
    """
    raw = as_tensor(raw)
    C = raw.shape[-1]
    soft = ops.add(ops.mul(ops.softmax(raw, axis=-1), 1.0 - C * SOFTMAX_FLOOR), SOFTMAX_FLOOR)
    return ops.mul(ops.add(soft, np.eye(C)), 0.5)


def raw_from_stochastic(q: np.ndarray) -> np.ndarray:
    """Raw weights whose constructed matrix is ``q`` (needs diagonal > 0.5)."""
    q = np.asarray(q, dtype=np.float64)
    C = q.shape[-1]
    target = (2.0 * q - np.eye(C) - SOFTMAX_FLOOR) / (1.0 - C * SOFTMAX_FLOOR)
    return np.log(np.maximum(target, 1e-300))


@dataclass
class GruClassifier:
    input_dim: int
    num_classes: int
    hidden_dim: int = 32
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, input_dim: int, num_classes: int, hidden_dim: int = 32,
             rng: np.random.Generator | None = None) -> "GruClassifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        H = hidden_dim
        params = {
            "gru_w": _uniform(rng, H, (input_dim, 3 * H)),
            "gru_u": _uniform(rng, H, (H, 3 * H)),
            "gru_b": _uniform(rng, H, (3 * H,)),
            "out_w": _uniform(rng, H, (H, num_classes)),
            "out_b": _uniform(rng, H, (num_classes,)),
        }
        return cls(input_dim, num_classes, hidden_dim, params)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward_sequence(self, x)

    def metadata(self) -> dict:
        return {"kind": "gru", "input_dim": self.input_dim, "num_classes": self.num_classes,
                "hidden_dim": self.hidden_dim}


def gru_probs(params: Mapping, x: np.ndarray, precision: str = "float64") -> Tensor:
    """Differentiable p(y_t | x_{1:t}) for a batch x of shape (B, T, d); returns (B, T, C)."""
    B, T, _ = x.shape
    hs = ops.gru(x, params["gru_w"], params["gru_u"], params["gru_b"], dtype=np.dtype(precision))
    H = hs.shape[-1]
    logits = ops.add(ops.matmul(ops.reshape(hs, (B * T, H)), params["out_w"]), params["out_b"])
    C = logits.shape[-1]
    return ops.reshape(ops.softmax(logits), (B, T, C))


def forward_sequence(model: GruClassifier, x, batch_size: int = 512) -> np.ndarray:
    """Probabilities for one sequence (T, d) -> (T, C) or a batch (B, T, d) -> (B, T, C)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != model.input_dim:
        raise ValueError(f"expected features with last dimension {model.input_dim}, got shape {x.shape}")
    out = [gru_probs(model.params, x[i:i + batch_size]).value for i in range(0, x.shape[0], batch_size)]
    probs = np.concatenate(out, axis=0) if out else np.empty((0, x.shape[1], model.num_classes))
    return probs[0] if single else probs


def predict_labels(model_or_probs, x=None) -> np.ndarray:
    """Argmax labels (0-based; ties go to the lowest class index)."""
    probs = model_or_probs if x is None else forward_sequence(model_or_probs, x)
    return np.argmax(np.asarray(probs), axis=-1)


@dataclass
class ContinuousNoiseNet:
    """Fully connected net from normalized time t/T to C*C raw matrix entries."""

    num_classes: int
    horizon: int
    depth: int = 4
    width: int = 32
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, num_classes: int, horizon: int, depth: int = 4, width: int = 32,
             rng: np.random.Generator | None = None) -> "ContinuousNoiseNet":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [1] + [width] * depth + [num_classes * num_classes]
        params = {}
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"net_w{k}"] = _uniform(rng, fan_in, (fan_in, fan_out))
            params[f"net_b{k}"] = _uniform(rng, fan_in, (fan_out,))
        return cls(num_classes, horizon, depth, width, params)

    def trajectory(self) -> np.ndarray:
        return noise_net_tensor(self.params, self.horizon, self.num_classes).value

    def metadata(self) -> dict:
        return {"kind": "continuous_noise_net", "num_classes": self.num_classes, "horizon": self.horizon,
                "depth": self.depth, "width": self.width}


def noise_net_tensor(params: Mapping, horizon: int, num_classes: int, times=None) -> Tensor:
    """Constructed matrices for t = 1..T (or the given ``times``); returns (len, C, C)."""
    t = np.arange(1, horizon + 1, dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    h = Tensor((t / horizon)[:, None])
    n_layers = sum(1 for k in params if k.startswith("net_w"))
    for k in range(n_layers):
        h = ops.add(ops.matmul(h, params[f"net_w{k}"]), params[f"net_b{k}"])
        if k < n_layers - 1:
            h = ops.tanh(h)
    C = num_classes
    return stochastic_from_raw(ops.reshape(h, (len(t), C, C)))


def noise_net_eval(net: ContinuousNoiseNet, t: int) -> np.ndarray:
    if not 1 <= t <= net.horizon:
        raise ValueError(f"t={t} outside [1, {net.horizon}]")
    return noise_net_tensor(net.params, net.horizon, net.num_classes, times=[t]).value[0]


@dataclass
class DiscontinuousNoiseParams:
    """One independent raw C x C block per time step; shape (T, C, C)."""

    blocks: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int, horizon: int) -> "DiscontinuousNoiseParams":
        return cls(np.zeros((horizon, num_classes, num_classes)))

    @property
    def horizon(self) -> int:
        return self.blocks.shape[0]

    def trajectory(self) -> np.ndarray:
        return stochastic_from_raw(self.blocks).value


def discontinuous_eval(params: DiscontinuousNoiseParams, t: int) -> np.ndarray:
    if not 1 <= t <= params.horizon:
        raise ValueError(f"t={t} outside [1, {params.horizon}]")
    return stochastic_from_raw(params.blocks[t - 1]).value


def save_checkpoint(path, params: Mapping[str, np.ndarray], metadata: Mapping) -> None:
    """Single JSON file: a metadata header plus flat float arrays with their shapes."""
    doc = {"metadata": dict(metadata),
           "params": {k: {"shape": list(v.shape), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
                      for k, v in sorted(params.items())}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text())
    params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return doc["metadata"], params


def classifier_from_checkpoint(path) -> GruClassifier:
    meta, params = load_checkpoint(path)
    gru = {k: v for k, v in params.items() if k.startswith(("gru_", "out_"))}
    return GruClassifier(meta["input_dim"], meta["num_classes"], meta["hidden_dim"], gru)
