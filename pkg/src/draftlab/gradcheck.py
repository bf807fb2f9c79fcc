"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from dataclasses import dataclass
import contextlib
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor, double_precision


@dataclass
class GradCheckReport:
    param: str
    status: str  # "pass", "fail" or "frozen"
    max_rel_error: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _upcast(store: ParamStore) -> ParamStore:
    out = ParamStore()
    with double_precision():
        for n, p in store.items():
            out.add(n, Tensor(p.tensor.data), p.group, p.trainable)
    return out


def finite_difference_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    param: str,
    tol: float = 1e-3,
    n_coords: int = 20,
    seed: int = 0,
    h: float | None = None,
    floor: float | None = None,
    fd_precision: str = "double",
) -> GradCheckReport:
    """Compare ``d f / d param`` from autodiff with central differences.

    The autodiff gradient is taken in the store's own precision. With
    ``fd_precision="double"`` (default) the central differences are evaluated
    on a float64 copy of the store, so float32 rounding of the loss does not
    swamp the difference quotient; ``"native"`` keeps the store's precision.

    The step follows the precision the differences are evaluated in:
    ``1e-3 * max(1, |x|)`` for float32 and ``1e-6`` for float64. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` defaults to 1e-3 (float32)
    or 1e-6 (float64) so vanishing gradients do not divide by zero.
    """
    entry = store.entry(param)
    if not entry.trainable:
        return GradCheckReport(param, "frozen", 0.0, 0, tol)
    x = entry.tensor
    double = x.data.dtype == np.float64
    if floor is None:
        floor = 1e-6 if double else 1e-3

    store.zero_grad()
    f(store).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    store.zero_grad()

    if fd_precision == "double" and not double:
        fd_store = _upcast(store)
        ctx = double_precision
        fd_double = True
    else:
        fd_store = store
        ctx = contextlib.nullcontext
        fd_double = double
    flat = fd_store[param].data.reshape(-1)

    rng = np.random.default_rng(seed)
    n = min(n_coords, flat.size)
    coords = rng.choice(flat.size, size=n, replace=False)
    worst = 0.0
    with ctx():
        for c in coords:
            orig = flat[c]
            step = h if h is not None else (1e-6 if fd_double else 1e-3 * max(1.0, abs(float(orig))))
            flat[c] = orig + step
            xp = float(flat[c])
            fp = float(f(fd_store).data.sum(dtype=np.float64))
            flat[c] = orig - step
            xm = float(flat[c])
            fm = float(f(fd_store).data.sum(dtype=np.float64))
            flat[c] = orig
            numeric = (fp - fm) / (xp - xm)
            worst = max(worst, _rel_err(float(analytic.reshape(-1)[c]), numeric, floor))
    return GradCheckReport(param, "pass" if worst <= tol else "fail", worst, n, tol)
