"""Minimal reverse-mode autodiff over float64 arrays."""

from . import kernels
from .ops import (
    ConfigError,
    GruParams,
    GrlConfig,
    SequenceTooShortError,
    ShapeError,
    add,
    concat,
    conv1d,
    dense,
    grad_reverse,
    gru_cell_step,
    gru_sequence,
    last_step,
    matmul,
    maxpool1d,
    mean,
    mul,
    pooled_lengths,
    relu,
    reshape,
    sigmoid,
    softmax,
    sum,
    tanh,
    weighted_cross_entropy,
)
from .tensor import NumericError, Tape, TapeError, Tensor, as_tensor


def backprop(tape: Tape, loss: Tensor, wrt=None):
    """Run the reverse pass and return gradients for ``wrt``.

    ``wrt`` may be a mapping of name to tensor (returns a dict with the same
    keys) or a sequence of tensors (returns a list). Tensors that did not
    influence the loss get a zero gradient.
    """
    grads = tape.backward(loss)
    if wrt is None:
        return grads
    if isinstance(wrt, dict):
        return {k: grads.get(id(t), _zeros(t)) for k, t in wrt.items()}
    return [grads.get(id(t), _zeros(t)) for t in wrt]


def _zeros(t):
    import numpy as np

    return np.zeros_like(t.value)


__all__ = [
    "ConfigError",
    "GruParams",
    "GrlConfig",
    "NumericError",
    "SequenceTooShortError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "as_tensor",
    "backprop",
    "concat",
    "conv1d",
    "dense",
    "grad_reverse",
    "gru_cell_step",
    "gru_sequence",
    "kernels",
    "last_step",
    "matmul",
    "maxpool1d",
    "mean",
    "mul",
    "pooled_lengths",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sum",
    "tanh",
    "weighted_cross_entropy",
]
