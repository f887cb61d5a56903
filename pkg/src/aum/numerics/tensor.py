"""Dense arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy buffer. Primitives applied while a
:class:`Tape` is active, to inputs that require gradients, append a node to
that tape holding the closure needed for the reverse pass. Outside any tape
nothing is recorded, so plain evaluation costs no bookkeeping.
"""

from __future__ import annotations

import itertools
import os
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .memory import meter

_uid = itertools.count()
_state = threading.local()

DEBUG = os.environ.get("AUM_DEBUG", "") not in ("", "0")


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle the after-every-primitive NaN/Inf assertion."""
    global DEBUG
    DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "uid", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _leaf: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.uid = next(_uid)
        self.is_leaf = _leaf
        meter.track(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the definitions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@dataclass
class Node:
    out_uid: int
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the block whose
    inputs require gradients are recorded here. Nodes are appended in
    execution order, so walking them backwards is a reverse topological
    order by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf
        reachable through this tape. Repeated calls add up."""
        if seed is None:
            if output.data.size != 1 or output.ndim != 0:
                raise ValueError(
                    f"gradient seed required for non-scalar output of shape {output.shape}"
                )
            seed = np.ones_like(output.data)
        if not output.requires_grad:
            return
        if output.is_leaf:
            _accumulate(output, seed)
            return
        pending: dict[int, np.ndarray] = {output.uid: seed}
        for node in reversed(self.nodes):
            g = pending.pop(node.out_uid, None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or inp is None:
                    continue
                uid, leaf = inp
                if leaf is not None:
                    _accumulate(leaf, gi)
                elif uid in pending:
                    pending[uid] = pending[uid] + gi
                else:
                    pending[uid] = gi


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.dtype)
    if g.shape != leaf.shape:
        raise ValueError(f"gradient shape {g.shape} does not match {leaf.shape}")
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def _stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap a primitive's result and, if gradients are needed, log it.

    ``backward`` maps the output gradient to a sequence with one entry per
    input (``None`` where no gradient flows).
    """
    if DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {np.shape(data)})")
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _leaf=not needs)
    if needs:
        refs = tuple(
            (t.uid, t if t.is_leaf else None) if t.requires_grad else None for t in inputs
        )
        tape.nodes.append(Node(out.uid, refs, backward))
    return out


def grad(output: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Run the reverse pass for a scalar ``output`` and return the
    accumulated gradient of every leaf that received one."""
    if output.data.size != 1 or output.ndim != 0:
        raise ValueError(f"grad() needs a scalar output, got shape {output.shape}")
    tape.backward(output)
    leaves: dict[Tensor, np.ndarray] = {}
    seen: set[int] = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp is None or inp[1] is None or inp[0] in seen:
                continue
            seen.add(inp[0])
            if inp[1].grad is not None:
                leaves[inp[1]] = inp[1].grad
    return leaves
