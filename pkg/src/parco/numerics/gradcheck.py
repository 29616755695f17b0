"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Union

import numpy as np

from ..errors import NumericalError, ParcoError
from .tensor import DiffArray, ParamStore, Tape

# Central differences carry roundoff of roughly 1e-16 * |f| / eps, so gradients
# smaller than this floor are compared in absolute rather than relative terms.
GRAD_FLOOR = 1e-4


def _targets(params) -> list[tuple[str, DiffArray]]:
    if isinstance(params, ParamStore):
        return list(params.items())
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name or f"arg{i}", p) for i, p in enumerate(params)]


def _scalar(f: Callable[[], DiffArray]) -> float:
    v = f()
    val = v.value if isinstance(v, DiffArray) else np.asarray(v)
    if val.size != 1:
        raise ParcoError(f"grad_check needs a scalar function, got shape {val.shape}")
    x = float(val.reshape(-1)[0])
    if not np.isfinite(x):
        raise NumericalError(f"grad_check: function value is not finite ({x})")
    return x


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def grad_check_detail(f: Callable[[], DiffArray],
                      params: Union[ParamStore, dict, Iterable[DiffArray]],
                      eps: float = 1e-5,
                      coords_per_param: Optional[int] = None,
                      seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter between tape and central differences.

    ``coords_per_param`` limits the check to that many randomly chosen
    coordinates of each array (all coordinates when None).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ParcoError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    targets = _targets(params)
    for _, p in targets:
        p.grad = None
    with Tape() as tape:
        out = f()
    if not np.all(np.isfinite(out.value)):
        raise NumericalError("grad_check: function value is not finite")
    tape.backward(out)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in targets:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        flat = p.value.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = range(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        worst = 0.0
        for k in coords:
            orig = flat[k]
            flat[k] = orig + eps
            up = _scalar(f)
            flat[k] = orig - eps
            down = _scalar(f)
            flat[k] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[k]), numeric))
        report[name] = worst
        p.grad = None
    return report


def grad_check(f: Callable[[], DiffArray],
               params: Union[ParamStore, dict, Iterable[DiffArray]],
               eps: float = 1e-5,
               coords_per_param: Optional[int] = None,
               seed: int = 0) -> float:
    """Maximum relative error over every checked coordinate."""
    report = grad_check_detail(f, params, eps=eps, coords_per_param=coords_per_param, seed=seed)
    return max(report.values(), default=0.0)
