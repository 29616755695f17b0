"""Minimal float64 reverse-mode array core."""

from . import checkpoint, ops
from .gradcheck import grad_check, grad_check_detail, relative_error
from .ops import (add, concat, cosine_similarity, exp, index, log, log_softmax, logsumexp,
                  lstm_cell, lstm_layer, matmul, mul, nll_gather, reshape, scale, sigmoid,
                  softmax, stack, sub, swapaxes, tanh)
from .ops import sum  # noqa: A004 - deliberate numpy-style name
from .tensor import DiffArray, ParamStore, Tape, active_tape, as_diff

__all__ = [
    "DiffArray", "ParamStore", "Tape", "active_tape", "as_diff", "checkpoint", "ops",
    "grad_check", "grad_check_detail", "relative_error",
    "add", "concat", "cosine_similarity", "exp", "index", "log", "log_softmax", "logsumexp",
    "lstm_cell", "lstm_layer", "matmul", "mul", "nll_gather", "reshape", "scale", "sigmoid",
    "softmax", "stack", "sub", "sum", "swapaxes", "tanh",
]
