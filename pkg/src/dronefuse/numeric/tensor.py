"""Dense float64 tensors and a reverse-mode gradient tape.

Feature maps are channels-last (W, H, C) with an optional leading batch
extent. A :class:`Tape` records every op whose inputs it tracks; gradients
are obtained with :func:`backward` or :meth:`Tape.gradient`.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class Tensor:
    """Immutable dense array of float64 scalars."""

    __slots__ = ("data", "_tape", "__weakref__")

    def __init__(self, data, *, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        arr.setflags(write=False)
        self.data = arr
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # arithmetic sugar; the actual ops live in dronefuse.numeric.ops
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, other):
        from .ops import mul, scale
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def _active_tapes() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Records differentiable ops executed while it is the active tape.

    Use as a context manager on one thread; tapes are not shared between
    threads.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], VJP]] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active_tapes()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, *tensors: Tensor):
        """Mark tensors as differentiation targets; returns them unchanged."""
        for t in tensors:
            self._tracked[id(t)] = t
            t._tape = self
        return tensors[0] if len(tensors) == 1 else tensors

    def is_tracked(self, t: Tensor) -> bool:
        return self._tracked.get(id(t)) is t

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        self._nodes.append((out, inputs, vjp))
        self._tracked[id(out)] = out
        out._tape = self

    def __len__(self) -> int:
        return len(self._nodes)

    def gradient(self, loss: Tensor, wrt):
        """Gradient of scalar ``loss`` w.r.t. one tensor or a sequence of them."""
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.is_tracked(loss):
            raise ValueError("loss was not recorded on this tape")
        single = isinstance(wrt, Tensor)
        targets = [wrt] if single else list(wrt)
        for t in targets:
            if not self.is_tracked(t):
                raise ValueError(f"{t!r} is not on the tape")

        cot: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for out, inputs, vjp in reversed(self._nodes):
            g = cot.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not self.is_tracked(inp):
                    continue
                key = id(inp)
                if key in cot:
                    cot[key] = cot[key] + gi
                else:
                    cot[key] = gi
        grads = [Tensor._wrap(cot.get(id(t), np.zeros(t.shape))) for t in targets]
        return grads[0] if single else grads


def record(out: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    """Attach ``out`` to the active tape if any input is tracked there."""
    stack = _active_tapes()
    if stack:
        tape = stack[-1]
        if any(tape.is_tracked(t) for t in inputs):
            tape._record(out, inputs, vjp)
    return out


def backward(loss: Tensor, wrt):
    """Exact reverse-mode gradient of ``loss`` w.r.t. ``wrt``."""
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not attached to a tape")
    return tape.gradient(loss, wrt)


def finite_difference_gradient(
    f: Callable[[Tensor], "Tensor | float"], x: Tensor, step: float = 1e-5
) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function."""
    if not step > 0:
        raise ValueError("step must be positive")
    base = x.data.reshape(-1)
    grad = np.empty(base.size)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += step
        minus = base.copy()
        minus[i] -= step
        fp = _scalar(f(Tensor._wrap(plus.reshape(x.shape))))
        fm = _scalar(f(Tensor._wrap(minus.reshape(x.shape))))
        grad[i] = (fp - fm) / (2 * step)
    return Tensor._wrap(grad.reshape(x.shape))


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(a, b) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
