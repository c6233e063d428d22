"""Differentiable primitives.

Every op takes Tensors (or array-likes, treated as constants) and returns a
Tensor. Broadcasting is limited to what numpy does for row-wise bias terms
and scalar operands; gradients are summed back to the operand shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node

EPS = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return make_node(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.value, b.value)
    sa, sb = a.shape, b.shape
    return make_node(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.value, b.value)
    av, bv = a.value, b.value

    def backward(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return make_node(av * bv, (a, b), backward)


def matmul(a, b) -> Tensor:
    """2-D matrix product, or a stack of them when both operands are 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim != av.ndim or av.shape[-1] != bv.shape[-2] \
            or av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_node(av @ bv, (a, b), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return make_node(y, (x,), lambda g: (g * y,))


def log(x, floor: float = EPS) -> Tensor:
    """Natural log with inputs clamped to ``floor``; clamped entries get no gradient."""
    x = as_tensor(x)
    xc = np.maximum(x.value, floor)
    live = x.value >= floor
    return make_node(np.log(xc), (x,), lambda g: (np.where(live, g / xc, 0.0),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward)


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(np.asarray(x.value.sum(axis=axis)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis), 1.0 / float(count))


def frobenius(x) -> Tensor:
    """Frobenius norm over the last two axes (one norm per matrix in a stack)."""
    x = as_tensor(x)
    if x.value.ndim < 2:
        raise ShapeError(f"frobenius: need at least 2-D input, got {x.shape}")
    nrm = np.sqrt((x.value ** 2).sum(axis=(-2, -1)))
    safe = np.maximum(nrm, EPS)

    def backward(g):
        return ((g / safe)[..., None, None] * x.value,)

    return make_node(nrm, (x,), backward)


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    y = np.clip(x.value, lo, hi)
    live = y == x.value
    return make_node(y, (x,), lambda g: (np.where(live, g, 0.0),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return make_node(y, (x,), lambda g: (g.reshape(old),))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_node(np.array(x.value[index]), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_node(y, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def repeat_leading(x, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    x = as_tensor(x)
    y = np.broadcast_to(x.value, (n,) + x.shape).copy()
    return make_node(y, (x,), lambda g: (g.sum(axis=0),))


def pick(probs, labels) -> Tensor:
    """Select ``probs[..., labels]`` along the last axis (labels are 0-based)."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[:-1] != labels.shape:
        raise ShapeError(f"pick: probabilities {probs.shape} vs labels {labels.shape}")
    idx = labels[..., None]
    y = np.take_along_axis(probs.value, idx, axis=-1)[..., 0]
    shape = probs.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return make_node(y, (probs,), backward)


def noisy_posterior(probs, q) -> Tensor:
    """Map clean posteriors (B, T, C) through per-step matrices (T, C, C): Q_t^T p."""
    probs, q = as_tensor(probs), as_tensor(q)
    p, qv = probs.value, q.value
    if p.ndim != 3 or qv.shape != (p.shape[1], p.shape[2], p.shape[2]):
        raise ShapeError(f"noisy_posterior: probs {p.shape} vs trajectory {qv.shape}")
    pt = p.transpose(1, 0, 2)  # (T, B, C)
    y = (pt @ qv).transpose(1, 0, 2)

    def backward(g):
        gt = g.transpose(1, 0, 2)
        gp = (gt @ qv.transpose(0, 2, 1)).transpose(1, 0, 2) if probs.requires_grad else None
        gq = pt.transpose(0, 2, 1) @ gt if q.requires_grad else None
        return gp, gq

    return make_node(y, (probs, q), backward)


def gru_forward_arrays(x, w, u, b):
    """Run a single-layer GRU over (B, T, d) inputs; return hidden states and a cache.

    Work is done time-major so every per-step slice is contiguous.
    """
    B, T, _ = x.shape
    H = u.shape[0]
    xp = x.transpose(1, 0, 2) @ w
    xp += b  # (T, B, 3H)
    # sigmoid(a) = (1 + tanh(a / 2)) / 2; the halving is folded into the inputs
    x_zr = 0.5 * xp[:, :, :2 * H]
    x_n = np.ascontiguousarray(xp[:, :, 2 * H:])
    dt = xp.dtype
    hs = np.empty((T, B, H), dt)
    gates = np.empty((T, B, 2 * H), dt)
    cand = np.empty((T, B, H), dt)
    rh_all = np.empty((T, B, H), dt)
    u_zr, u_n = 0.5 * u[:, :2 * H], np.ascontiguousarray(u[:, 2 * H:])
    h = np.zeros((B, H), dt)
    for t in range(T):
        zr = gates[t]
        np.dot(h, u_zr, out=zr)
        zr += x_zr[t]
        np.tanh(zr, out=zr)
        zr += 1.0
        zr *= 0.5
        rh = rh_all[t]
        np.multiply(zr[:, H:], h, out=rh)
        n = cand[t]
        np.dot(rh, u_n, out=n)
        n += x_n[t]
        np.tanh(n, out=n)
        hn = hs[t]
        np.subtract(h, n, out=hn)
        hn *= zr[:, :H]
        hn += n
        h = hn
    return hs.transpose(1, 0, 2), (hs, gates, cand, rh_all)


def gru_backward_arrays(g_hs, x, w, u, cache, need_input_grad: bool = True):
    hs, gates, cand, rh_all = cache
    T, B, H = hs.shape
    g_tm = np.ascontiguousarray(g_hs.transpose(1, 0, 2))
    g_pre = np.empty((T, B, 3 * H), hs.dtype)
    _gru_backward_steps(g_tm, u, hs, gates, cand, g_pre)
    flat = g_pre.reshape(T * B, 3 * H)
    gu = np.empty_like(u)
    gu[:, 2 * H:] = rh_all.reshape(T * B, H).T @ flat[:, 2 * H:]
    gu[:, :2 * H] = hs[:-1].reshape((T - 1) * B, H).T @ g_pre[1:, :, :2 * H].reshape((T - 1) * B, 2 * H)
    x_tm = x.transpose(1, 0, 2).reshape(T * B, -1)
    gw = x_tm.T @ flat
    gb = flat.sum(axis=0)
    gx = (g_pre @ w.T).transpose(1, 0, 2) if need_input_grad else None
    return gx, gw, gu, gb


def _gru_backward_steps(g_tm, u, hs, gates, cand, g_pre):
    T, B, H = hs.shape
    u_zr_t = np.ascontiguousarray(u[:, :2 * H].T)
    u_n_t = np.ascontiguousarray(u[:, 2 * H:].T)
    z, r = gates[..., :H], gates[..., H:]
    h_prev = np.empty_like(hs)
    h_prev[0] = 0.0
    h_prev[1:] = hs[:-1]
    # step-independent factors, computed for all t at once
    dn_scale = (1.0 - z) * (1.0 - cand * cand)
    gate_slope = gates * (1.0 - gates)
    z_src = h_prev - cand
    dh = np.zeros((B, H), hs.dtype)
    dzr_src = np.empty((B, 2 * H), hs.dtype)
    for t in range(T - 1, -1, -1):
        dh += g_tm[t]
        gp = g_pre[t]
        dn = gp[:, 2 * H:]
        np.multiply(dh, dn_scale[t], out=dn)
        drh = dn @ u_n_t
        np.multiply(dh, z_src[t], out=dzr_src[:, :H])
        np.multiply(drh, h_prev[t], out=dzr_src[:, H:])
        dzr = gp[:, :2 * H]
        np.multiply(dzr_src, gate_slope[t], out=dzr)
        dh *= z[t]
        drh *= r[t]
        dh += drh
        dh += dzr @ u_zr_t


def gru(x, w, u, b, dtype=np.float64) -> Tensor:
    """Single-layer GRU over a batch of sequences.

    Shapes: x (B, T, d), w (d, 3H), u (H, 3H), b (3H,); gate column blocks are
    ordered update, reset, candidate. Returns hidden states (B, T, H), with
    h_0 = 0 and h_t = (1 - z) * n + z * h_{t-1}.

    ``dtype`` is the precision of the recurrence itself. Inputs, outputs and
    gradients stay float64; float32 roughly halves the kernel time.
    """
    x, w, u, b = (as_tensor(v) for v in (x, w, u, b))
    if x.value.ndim != 3 or w.value.ndim != 2 or x.shape[2] != w.shape[0]:
        raise ShapeError(f"gru: input {x.shape} vs input weights {w.shape}")
    H = u.shape[0]
    if u.shape != (H, 3 * H) or w.shape[1] != 3 * H or b.shape != (3 * H,):
        raise ShapeError(f"gru: recurrent weights {u.shape}, input weights {w.shape}, bias {b.shape}")
    xv, wv, uv, bv = (np.asarray(v.value, dtype=dtype) for v in (x, w, u, b))
    hs, cache = gru_forward_arrays(xv, wv, uv, bv)

    def backward(g):
        grads = gru_backward_arrays(np.asarray(g, dtype=dtype), xv, wv, uv, cache, x.requires_grad)
        return tuple(None if v is None else np.asarray(v, dtype=np.float64) for v in grads)

    return make_node(hs, (x, w, u, b), backward)
