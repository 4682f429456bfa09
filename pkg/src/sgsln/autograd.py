"""Tensor type and the reverse-mode tape.

Every differentiable op in :mod:`sgsln.functional` computes its forward value
with numpy and, when any input requires a gradient, appends one record to the
thread's active tape. :func:`backward` walks that tape in reverse append order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __sub__(self, other):
        from . import functional as F
        return F.add(self, F.scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.scale(self, -1.0), other)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            return F.div(self, other)
        return F.scale(self, 1.0 / other)


class _Record:
    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs, outputs, backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only log of differentiable operations for one thread."""

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        for rec in self.records:
            for out in rec.outputs:
                out._record = None
        self.records.clear()


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.enabled = True
    return _local


def get_tape() -> Tape:
    return _state().tape


def grad_enabled() -> bool:
    return _state().enabled


@contextmanager
def no_grad():
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def record(inputs: Sequence[Tensor], outputs: Sequence[Tensor],
           backward_fn: Callable[[list[np.ndarray]], Sequence[np.ndarray | None]]) -> None:
    """Attach ``outputs`` to the tape if any of ``inputs`` needs a gradient.

    ``backward_fn`` receives one upstream gradient per output (zeros where an
    output was unused) and returns one gradient per input (``None`` allowed).
    """
    st = _state()
    if not st.enabled or not any(t.requires_grad for t in inputs):
        return
    rec = _Record(tuple(inputs), tuple(outputs), backward_fn)
    for out in outputs:
        out.requires_grad = True
        out._record = rec
    st.tape.records.append(rec)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else get_tape()
    if not loss.requires_grad:
        tape.reset()
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf:
        _accumulate_leaf(loss, pending.pop(id(loss)))
    for rec in reversed(tape.records):
        upstream = [pending.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in upstream):
            continue
        upstream = [np.zeros_like(o.data) if g is None else g
                    for g, o in zip(upstream, rec.outputs)]
        in_grads = rec.backward_fn(upstream)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t.is_leaf:
                _accumulate_leaf(t, g)
            else:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + g
                else:
                    pending[key] = g
    tape.reset()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.shape:
        raise ValueError(f"gradient shape {g.shape} does not match leaf shape {t.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g
