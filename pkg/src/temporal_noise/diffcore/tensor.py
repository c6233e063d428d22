"""Tape-based reverse-mode differentiation over dense float64 arrays."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's arity rules."""


class Tensor:
    """A node holding a float64 value, optionally recorded on a tape.

    Constants (``tape is None``) never receive gradients. Parameters are
    leaf nodes registered through :meth:`Tape.parameter`.
    """

    __slots__ = ("value", "grad", "tape", "requires_grad", "name", "parents", "backward_fn")
    __array_priority__ = 100  # keep ndarray.__mul__ from swallowing Tensor operands

    def __init__(self, value, tape: Optional["Tape"] = None, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[BackwardFn] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_parameter(self) -> bool:
        return self.requires_grad and self.backward_fn is None and self.tape is not None

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.is_parameter else "node")
        return f"Tensor({tag}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    # operator sugar; the real definitions live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)


class Tape:
    """Ordered record of operations; inputs always precede their outputs."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameters: list[Tensor] = []

    def parameter(self, value, name: Optional[str] = None) -> Tensor:
        node = Tensor(np.array(value, dtype=np.float64), tape=self, requires_grad=True, name=name)
        self.parameters.append(node)
        return node

    def record(self, node: Tensor) -> Tensor:
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Create the output of a primitive and record it if any input is tracked."""
    tape = None
    for p in parents:
        if p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    out = Tensor(value)
    if tape is not None:
        out.tape = tape
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def backpropagate(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(node) into every tracked node; return parameter grads."""
    if root.value.size != 1 or root.value.ndim != 0:
        raise ShapeError(f"backpropagate needs a scalar root, got shape {root.shape}")
    for p in tape.parameters:
        p.grad = None
    for n in tape.nodes:
        n.grad = None
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        pgrads = node.backward_fn(g)
        for parent, pg in zip(node.parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.value.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} does not match node shape {parent.value.shape}"
                )
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
        if node is not root:
            node.grad = None  # intermediate buffers are not needed past this point
    grads = {}
    for p in tape.parameters:
        grads[p] = p.grad if p.grad is not None else np.zeros_like(p.value)
        p.grad = grads[p]
    return grads
