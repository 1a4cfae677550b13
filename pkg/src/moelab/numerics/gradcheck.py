"""Central finite-difference gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import DiffTensor


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str | None = None
    worst_index: tuple[int, ...] | None = None
    n_checked: int = 0
    message: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index)}" if self.worst_param is not None else ""
        return f"{status} max_rel_error={self.max_rel_error:.3e}{where} ({self.n_checked} coords) {self.message}".rstrip()


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    f: Callable[[], DiffTensor],
    params: Sequence[DiffTensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-4,
    names: Sequence[str] | None = None,
    analytic: Sequence[np.ndarray] | None = None,
    max_coords: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against (f(p+h) - f(p-h)) / 2h.

    ``params`` are perturbed in place and must be 64-bit. ``analytic`` may be
    supplied (e.g. from a 32-bit run on the same values); otherwise it is taken
    from ``f().backward()``. Coordinates whose gradients are both smaller than
    ``floor`` are compared in absolute terms against ``floor``.
    ``max_coords`` samples that many coordinates per tensor using ``rng``.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p, name in zip(params, names):
        if p.values.dtype != np.float64:
            raise TypeError(f"finite_difference_check needs float64 params, {name} is {p.values.dtype}")

    if analytic is None:
        for p in params:
            p.zero_grad()
        loss = f()
        if not np.isfinite(loss.values).all():
            return GradCheckReport(False, math.inf, message="non-finite loss at the base point")
        loss.backward()
        analytic = [p.grad.copy() for p in params]

    worst = GradCheckReport(True, 0.0)
    n_checked = 0
    for p, name, a in zip(params, names, analytic):
        flat = p.values.reshape(-1)
        a_flat = np.asarray(a, dtype=np.float64).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().values)
            flat[i] = orig - h
            fm = float(f().values)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                idx = np.unravel_index(int(i), p.shape)
                return GradCheckReport(
                    False, math.inf, name, tuple(int(k) for k in idx), n_checked, "non-finite loss under perturbation"
                )
            numeric[j] = (fp - fm) / (2.0 * h)
        n_checked += coords.size
        if coords.size == 0:
            continue
        err = relative_error(a_flat[coords], numeric, floor)
        k = int(np.argmax(err))
        worst.per_param[name] = float(err[k])
        if err[k] > worst.max_rel_error or worst.worst_param is None:
            worst.max_rel_error = float(err[k])
            worst.worst_param = name
            worst.worst_index = tuple(int(v) for v in np.unravel_index(int(coords[k]), p.shape))
    worst.n_checked = n_checked
    worst.passed = worst.max_rel_error < tol
    return worst
