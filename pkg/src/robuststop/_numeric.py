"""Helpers shared by the exact (rational) and floating-point code paths."""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def to_array(values, exact: bool = False) -> np.ndarray:
    """Coerce ``values`` to a float64 array, or an object array of Fractions."""
    if exact:
        arr = np.asarray(values, dtype=object)
        out = np.empty(arr.shape, dtype=object)
        flat = out.reshape(-1)
        for i, v in enumerate(arr.reshape(-1)):
            flat[i] = as_fraction(v)
        return out
    return np.asarray(values, dtype=float)


def as_fraction(v) -> Fraction:
    """Exact value of ``v``; floats go through their shortest repr so 0.6 -> 3/5."""
    if isinstance(v, Fraction):
        return v
    if isinstance(v, (float, np.floating)):
        return Fraction(repr(float(v)))
    if isinstance(v, str):
        return Fraction(v)
    return Fraction(int(v)) if isinstance(v, (int, np.integer)) else Fraction(v)


def is_exact(arr: np.ndarray) -> bool:
    return arr.dtype == object


def zeros(n: int, exact: bool) -> np.ndarray:
    if exact:
        out = np.empty(n, dtype=object)
        out[:] = [Fraction(0)] * n
        return out
    return np.zeros(n)


def group_sum(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum ``values`` over integer group labels (``bincount`` for floats)."""
    if is_exact(values):
        out = zeros(n_groups, True)
        np.add.at(out, groups, values)
        return out
    return np.bincount(groups, weights=values, minlength=n_groups)


def tie_tol(exact: bool) -> float:
    return 0 if exact else 1e-12
