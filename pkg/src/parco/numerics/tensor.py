"""DiffArray, Tape and ParamStore: the reverse-mode core."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ParcoError, TapeError

_TAPES: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class DiffArray:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; imported lazily to avoid a cycle with ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


BackwardFn = Callable[..., Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are recorded. ``backward`` replays the record
    in exact reverse order and may run only once.
    """

    def __init__(self) -> None:
        self.records: list[tuple[tuple[DiffArray, ...], tuple[DiffArray, ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, outputs, inputs, backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape whose backward already ran")
        self.records.append((tuple(outputs), tuple(inputs), backward))

    def backward(self, loss: DiffArray, seed: Optional[np.ndarray] = None) -> None:
        if self._consumed:
            raise TapeError("backward already ran on this tape; record a new one")
        self._consumed = True
        if not loss.requires_grad:
            return
        if seed is None:
            if loss.value.size != 1:
                raise TapeError(f"backward from non-scalar {loss.shape} needs an explicit seed")
            seed = np.ones_like(loss.value)
        # intermediate buffers are local; leaves accumulate into .grad
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        for outputs, inputs, fn in reversed(self.records):
            out_grads = [grads.pop(id(o), None) for o in outputs]
            if all(g is None for g in out_grads):
                continue
            if len(outputs) > 1:
                out_grads = [np.zeros_like(o.value) if g is None else g
                             for o, g in zip(outputs, out_grads)]
            in_grads = fn(*out_grads)
            for x, g in zip(inputs, in_grads):
                if g is None or not x.requires_grad:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever is left belongs to leaves (never produced by a record)
        produced = {id(o) for outs, _, _ in self.records for o in outs}
        leaves: dict[int, DiffArray] = {}
        for _, inputs, _ in self.records:
            for x in inputs:
                if x.requires_grad and id(x) not in produced:
                    leaves[id(x)] = x
        for key, g in grads.items():
            leaf = leaves.get(key)
            if leaf is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def record(outputs, inputs, backward: BackwardFn) -> None:
    """Attach ``outputs`` to the active tape when any input needs a gradient."""
    tape = active_tape()
    if tape is None or not any(x.requires_grad for x in inputs):
        return
    for o in outputs:
        o.requires_grad = True
    tape.record(outputs, inputs, backward)


class ParamStore:
    """Named, insertion-ordered collection of trainable arrays."""

    def __init__(self) -> None:
        self._params: "OrderedDict[str, DiffArray]" = OrderedDict()

    def add(self, name: str, value) -> DiffArray:
        if name in self._params:
            raise ParcoError(f"parameter {name!r} registered twice")
        p = DiffArray(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> DiffArray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def with_prefix(self, prefix: str) -> list[DiffArray]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        return float(np.sqrt(total))

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, v in snap.items():
            self._params[n].value = v.copy()
