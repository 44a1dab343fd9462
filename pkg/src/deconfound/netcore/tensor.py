"""Tensor and tape for reverse-mode differentiation."""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        v = np.asarray(value, dtype=np.float64)
        # not np.ascontiguousarray: it turns 0-d scalars into shape (1,)
        self.value = v if v.flags.c_contiguous else v.copy(order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_active: list["Tape"] = []


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed primitive ops.

    Ops executed while the tape is active (``with Tape() as tape:``) are
    appended in execution order, so the record is topologically sorted by
    construction. ``backward`` walks it once in reverse; a tape cannot be
    replayed after that.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, inputs, output, backward):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.ops.append(_Op(inputs, output, backward))

    def backward(self, loss: Tensor, seed=None) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf that requires it.

        Returns the leaf gradients keyed by ``id(tensor)``.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if seed is None and loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True

        produced = {id(op.output) for op in self.ops}
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        leaves: dict[int, Tensor] = {}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t
        self.ops = []
        out = {}
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
            out[key] = g
        return out


def current_tape() -> Tape | None:
    return _active[-1] if _active else None


def record(inputs, output: Tensor, backward) -> Tensor:
    """Attach ``output`` to the active tape when any input needs a gradient."""
    if not np.all(np.isfinite(output.value)):
        raise NumericError("non-finite value produced in forward pass")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(inputs, output, backward)
    return output
