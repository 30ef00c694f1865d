"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value is a ``(n, c, h, w)`` array. Operations record a node on the
tape when any input requires a gradient; :func:`backward` sweeps the
recorded nodes in reverse recording order.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_DTYPES = {"test": np.float64, "train": np.float32}


class EngineState:
    mode = "test"
    debug = True
    # release-mode finiteness probe cadence (in ops)
    sample_every = 32
    grad_enabled = True
    op_counter = 0
    mac_counter: Optional[list] = None


_state = EngineState()
_node_ids = itertools.count()


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


def set_mode(mode: str) -> None:
    """Select ``"test"`` (float64) or ``"train"`` (float32) precision."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown mode {mode!r}")
    _state.mode = mode


def get_mode() -> str:
    return _state.mode


def get_dtype():
    return _DTYPES[_state.mode]


def set_debug(flag: bool) -> None:
    _state.debug = bool(flag)


@contextlib.contextmanager
def precision(mode: str, debug: Optional[bool] = None):
    old = (_state.mode, _state.debug)
    set_mode(mode)
    if debug is not None:
        _state.debug = debug
    try:
        yield
    finally:
        _state.mode, _state.debug = old


@contextlib.contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def count_macs():
    """Accumulate multiply-accumulate counts of conv and matmul ops."""
    old = _state.mac_counter
    box = [0]
    _state.mac_counter = box
    try:
        yield box
    finally:
        _state.mac_counter = old


def add_macs(n: int) -> None:
    if _state.mac_counter is not None:
        _state.mac_counter[0] += int(n)


class Node:
    __slots__ = ("id", "op", "parents", "backward_fn", "consumed", "leaf")

    def __init__(self, op, parents, backward_fn, leaf=None):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False
        self.leaf = leaf


class Tensor:
    """A 4-D array plus an optional tape handle."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[Node] = None
        if self.requires_grad:
            self._node = Node("leaf", (), None, leaf=self)

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None or self._node.leaf is self

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        return backward(self)

    # arithmetic sugar; the ops live in duat.ops
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor.scalar(float(x))
    return Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    _state.op_counter += 1
    if not _state.debug and _state.op_counter % _state.sample_every:
        return
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording a tape node when needed.

    ``backward_fn(grad)`` returns one gradient (or None) per parent.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._node = None
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def _collect(root: Node) -> list:
    seen = set()
    order = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        for p in node.parents:
            if p._node is not None and p._node.id not in seen:
                stack.append(p._node)
    # reverse recording order is a valid reverse topological order
    order.sort(key=lambda n: n.id, reverse=True)
    return order


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    Returns a map from leaf tensor to the gradient contributed by this sweep.
    Interior nodes are freed, so a second sweep over the same graph raises.
    """
    if root.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward() needs a (1,1,1,1) root, got {root.shape}")
    if root._node is None:
        raise TapeError("root does not require grad; nothing was recorded")
    if root._node.consumed:
        raise TapeError("tape already consumed; run the forward pass again")

    nodes = _collect(root._node)
    grads: Dict[int, np.ndarray] = {root._node.id: np.ones_like(root.data)}
    result: Dict[Tensor, np.ndarray] = {}
    for node in nodes:
        g = grads.pop(node.id, None)
        if node.leaf is not None:
            leaf = node.leaf
            if g is None:
                continue
            if g.shape != leaf.shape:
                raise ShapeError(f"gradient shape {g.shape} != leaf shape {leaf.shape}")
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            result[leaf] = g
            continue
        if node.consumed:
            raise TapeError(f"node {node.op} already consumed")
        if g is not None:
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent._node is None:
                    continue
                pid = parent._node.id
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        node.consumed = True
        node.backward_fn = None
    return result


def iter_tape(root: Tensor) -> Iterator[Node]:
    """Yield the recorded nodes reachable from ``root`` in recording order."""
    if root._node is None:
        return iter(())
    return iter(reversed(_collect(root._node)))
