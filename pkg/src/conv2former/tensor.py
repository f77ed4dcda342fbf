"""Dense tensors and the reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` (opened
with ``with Tape() as tape:``) whenever one of their inputs requires a
gradient. Outside a tape nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)
MAX_RANK = 4


class Tensor:
    """Row-major float32/float64 array of rank <= 4 with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in FLOAT_DTYPES:
            raise ContractError(f"unsupported dtype {arr.dtype}")
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------- tape


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def current_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of executed ops for one forward pass.

    Single-threaded: the tape belongs to the thread that opened it, and a
    second backward (concurrent or sequential) on the same tape raises
    :class:`ContractError`. Nodes are dropped after backward.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._owner = threading.get_ident()
        self._lock = threading.Lock()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        s = _stack()
        if s and s[-1] is self:
            s.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf on the tape."""
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if threading.get_ident() != tape._owner:
        raise ContractError("tape used from a thread other than its owner")
    if not tape._lock.acquire(blocking=False):
        raise ContractError("concurrent backward on the same tape")
    try:
        if tape._consumed:
            raise ContractError("tape already consumed by a previous backward")
        tape._consumed = True
        grads: dict[int, np.ndarray] = {}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        for node in tape.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in tape._produced:
                    leaves[id(t)] = t
        if id(loss) in tape._produced:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                target = leaf_grads if key in leaves else grads
                if key in target:
                    target[key] = target[key] + gi
                else:
                    target[key] = gi
        for key, t in leaves.items():
            gi = leaf_grads.get(key)
            if gi is None:
                gi = np.zeros_like(t.data)
            gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
            t.grad = gi.copy() if t.grad is None else t.grad + gi
        tape.nodes.clear()
        tape._produced.clear()
    finally:
        tape._lock.release()


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    s = _stack()
    saved = s[:]
    s.clear()
    try:
        yield
    finally:
        s[:] = saved


# ---------------------------------------------------------------- op plumbing


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's output, check finiteness and record on the active tape."""
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


# MAC counting: ops report the multiply-accumulates they perform.


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counters = getattr(_local, "counters", None)
    if counters is None:
        counters = _local.counters = []
    c = MacCounter()
    counters.append(c)
    try:
        yield c
    finally:
        counters.remove(c)


def report_macs(op: str, n: int) -> None:
    for c in getattr(_local, "counters", ()):
        c.add(op, n)


# Fault injection: a test hook that perturbs one backward rule so the
# gradient checker can be shown to catch it.

FAULTS: set[str] = set()
FAULTABLE_OPS = ("hadamard",)


@contextmanager
def inject_fault(op: str) -> Iterator[None]:
    if op not in FAULTABLE_OPS:
        raise ConfigError(f"no fault hook for {op!r}; available: {', '.join(FAULTABLE_OPS)}")
    FAULTS.add(op)
    try:
        yield
    finally:
        FAULTS.discard(op)
