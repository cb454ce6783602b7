"""Covering numbers, Dudley's entropy integral and empirical sub-Gaussian checks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

EXACT_COVER_MAX_POINTS = 12
# exp() overflows float64 beyond this argument
_EXP_LIMIT = 709.0


class SpaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SemimetricSample:
    points: tuple
    dist: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=float)
        n = len(self.points)
        if d.shape != (n, n):
            raise SpaceError("distance matrix must be square with one row per point")
        if not np.allclose(d, d.T, atol=0, rtol=0) or (np.diag(d) != 0).any() or (d < 0).any():
            raise SpaceError("semimetric must be symmetric, nonnegative, with zero diagonal")
        worst = triangle_violation(d)
        if worst > 1e-9:
            raise SpaceError(f"triangle inequality violated by {worst:.3g}")
        d.setflags(write=False)
        object.__setattr__(self, "dist", d)

    @property
    def diameter(self) -> float:
        return float(self.dist.max()) if len(self.points) else 0.0

    def __len__(self) -> int:
        return len(self.points)


def triangle_violation(d: np.ndarray, max_full: int = 150, n_sample: int = 200_000, seed: int = 0) -> float:
    """Largest d(i,k) - d(i,j) - d(j,k); exhaustive for small spaces, sampled above."""
    n = len(d)
    if n < 3:
        return 0.0
    if n <= max_full:
        worst = 0.0
        for j in range(n):
            worst = max(worst, float((d - d[:, [j]] - d[[j], :]).max()))
        return worst
    rng = np.random.default_rng(seed)
    i, j, k = rng.integers(0, n, size=(3, n_sample))
    return float(max(0.0, (d[i, k] - d[i, j] - d[j, k]).max()))


def space_from_points(points: Sequence, metric: str = "abs") -> SemimetricSample:
    """Scalar points with |s - t| ("abs") or sqrt|s - t| ("sqrt_abs")."""
    x = np.asarray(points, dtype=float)
    diff = np.abs(x[:, None] - x[None, :])
    if metric == "abs":
        d = diff
    elif metric == "sqrt_abs":
        d = np.sqrt(diff)
    else:
        raise SpaceError(f"unknown metric {metric!r}")
    return SemimetricSample(tuple(points), d)


@dataclass(frozen=True)
class Cover:
    size: int
    exact: bool
    centres: tuple[int, ...]

    def __int__(self) -> int:
        return self.size


def _ball_masks(dist: np.ndarray, eps: float) -> list[int]:
    return [int(sum(1 << j for j in np.flatnonzero(row <= eps))) for row in dist]


def covering_number(s: SemimetricSample, eps: float, method: str = "auto") -> Cover:
    """Minimal number of closed eps-balls centred in the sample that cover it.

    ``method="auto"`` searches exhaustively up to 12 points and falls back to
    the greedy set-cover bound (``exact=False``) beyond that.
    """
    if eps < 0:
        raise SpaceError("eps must be nonnegative")
    n = len(s)
    if n == 0:
        return Cover(0, True, ())
    if method == "auto":
        method = "exact" if n <= EXACT_COVER_MAX_POINTS else "greedy"
    masks = _ball_masks(s.dist, eps)
    full = (1 << n) - 1
    if method == "exact":
        for k in range(1, n + 1):
            for centres in itertools.combinations(range(n), k):
                acc = 0
                for c in centres:
                    acc |= masks[c]
                if acc == full:
                    return Cover(k, True, centres)
        raise AssertionError("unreachable: every point covers itself")
    if method != "greedy":
        raise ValueError(f"unknown method {method!r}")
    covered, centres = 0, []
    while covered != full:
        gains = [bin(m & ~covered).count("1") for m in masks]
        c = int(np.argmax(gains))
        centres.append(c)
        covered |= masks[c]
    return Cover(len(centres), n <= 1, tuple(centres))


def _breakpoints(s: SemimetricSample, tol: float = 1e-12) -> np.ndarray:
    vals = np.unique(s.dist[s.dist > 0])
    if vals.size == 0:
        return vals
    keep = [vals[0]]
    for v in vals[1:]:
        if v - keep[-1] > tol:
            keep.append(v)
    return np.array(keep)


def covering_profile(s: SemimetricSample, method: str = "auto") -> tuple[np.ndarray, list[int], bool]:
    """Breakpoints b_0 = 0 < b_1 < ... and N(eps) on each [b_i, b_{i+1})."""
    bps = np.concatenate([[0.0], _breakpoints(s)])
    covers = [covering_number(s, b, method) for b in bps]
    return bps, [c.size for c in covers], all(c.exact for c in covers)


def dudley_integral(s: SemimetricSample, delta: float, method: str = "auto") -> float:
    """Integral over [0, delta] of sqrt(ln N(eps)), summed exactly over the steps of N."""
    if delta <= 0 or len(s) <= 1:
        return 0.0
    bps, counts, _ = covering_profile(s, method)
    ends = np.append(bps[1:], np.inf)
    total = 0.0
    for a, b, nn in zip(bps, ends, counts):
        if a >= delta:
            break
        total += math.sqrt(math.log(nn)) * (min(b, delta) - a)
    return total


def rescale_factor(c_const: float) -> float:
    """Scale turning a nearly sub-Gaussian constant C into a sub-Gaussian one."""
    if c_const < 1:
        raise SpaceError("the constant C must be >= 1")
    return math.sqrt(12 * (2 * c_const + 1))


def rescale_semimetric(s: SemimetricSample, c_const: float) -> SemimetricSample:
    return SemimetricSample(s.points, s.dist * rescale_factor(c_const))


@dataclass(frozen=True, eq=False)
class FieldSamples:
    """Samples X^theta(omega): one row per point, one column per sample path."""

    values: np.ndarray
    seed: int | None = None
    generator: str = "unknown"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise SpaceError("field samples must be a (points, samples) matrix")
        if not np.isfinite(v).all():
            raise SpaceError("field samples must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


@dataclass
class Certificate:
    c_hat: float | None
    c_upper: float | None
    c_lower: float | None
    pass_at: dict
    certified_at: dict
    cells: list = field(default_factory=list)
    untestable: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "c_hat": self.c_hat,
            "c_upper": self.c_upper,
            "c_lower": self.c_lower,
            "pass_at": {str(k): v for k, v in self.pass_at.items()},
            "certified_at": {str(k): v for k, v in self.certified_at.items()},
            "n_cells": len(self.cells),
            "untestable": self.untestable,
        }


DEFAULT_LAMBDAS = (0.25, 0.5, 1.0, 2.0, 4.0)


def certify_nearly_subgaussian(
    f: FieldSamples,
    s: SemimetricSample,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDAS,
    confidence: float = 0.99,
    c_grid: Sequence[float] = (1.0, 2.0),
    n_boot: int = 1000,
    seed: int = 0,
    min_samples: int = 100,
    chunk: int = 50,
) -> Certificate:
    """Empirical check of E exp(lam (X^a - X^b)) <= C exp(lam^2 d(a,b)^2 / 2).

    Every ordered pair and lambda is a cell.  The MGF is estimated by the
    sample mean and bracketed by a percentile bootstrap (shared resamples,
    ``n_boot`` draws) at Bonferroni level ``(1 - confidence) / n_cells`` per
    side, widened to the bootstrap-normal interval on the log scale.  ``c_hat`` is the largest point-estimate ratio.  ``pass_at[C]``:
    no cell's lower bound exceeds C, i.e. C is not refuted at the given
    confidence.  ``certified_at[C]``: every upper bound is below C.  Cells
    whose exponent overflows float64 are listed as untestable and make
    every verdict False.
    """
    X = f.values
    n, M = X.shape
    if n != len(s):
        raise SpaceError("field rows must match the points of the space")
    if M < min_samples:
        raise SpaceError(f"need at least {min_samples} samples, got {M}")
    lams = np.asarray(lambda_grid, dtype=float)
    if (lams <= 0).any():
        raise SpaceError("lambda grid must be positive")
    cells, untestable, exps = [], [], []
    for a, b in itertools.permutations(range(n), 2):
        diff = X[a] - X[b]
        d2 = s.dist[a, b] ** 2
        for lam in lams:
            arg = lam * diff
            if arg.max() > _EXP_LIMIT:
                untestable.append({"pair": [a, b], "lambda": float(lam)})
                continue
            cells.append((a, b, float(lam), lam * lam * d2 / 2))
            exps.append(arg)
    if not cells:
        # with no pairs the bound holds for every C >= 1; with only
        # untestable cells nothing can be certified
        vacuous = not untestable
        v = 1.0 if vacuous else None
        verdict = {c: vacuous and c >= 1 for c in c_grid}
        return Certificate(v, v, v, verdict, dict(verdict), [], untestable)
    A = np.vstack(exps).T  # (M, cells)
    shift = A.max(axis=0)
    E = np.exp(A - shift)
    log_mean = np.log(E.mean(axis=0)) + shift
    rng = np.random.default_rng(seed)
    boot = np.empty((n_boot, len(cells)))
    for start in range(0, n_boot, chunk):
        stop = min(start + chunk, n_boot)
        idx = rng.integers(0, M, size=(stop - start, M))
        counts = np.vstack([np.bincount(row, minlength=M) for row in idx]).astype(float)
        boot[start:stop] = np.log(counts @ E / M) + shift
    alpha = (1 - confidence) / len(cells)
    # Bonferroni tails are finer than 1/n_boot, where percentiles degrade to
    # extreme order statistics; widen to the bootstrap-normal bound as well
    half = norm.ppf(1 - alpha) * boot.std(axis=0, ddof=1)
    lo = np.minimum(np.quantile(boot, alpha, axis=0), log_mean - half)
    hi = np.maximum(np.quantile(boot, 1 - alpha, axis=0), log_mean + half)
    penalty = np.array([c[3] for c in cells])
    ratio, ratio_lo, ratio_hi = (np.exp(v - penalty) for v in (log_mean, lo, hi))
    c_hat, c_lower, c_upper = float(ratio.max()), float(ratio_lo.max()), float(ratio_hi.max())
    # an untestable cell can neither refute nor confirm, so no verdict passes
    clean = not untestable
    table = [
        {"pair": [a, b], "lambda": lam, "ratio": float(r), "lower": float(rl), "upper": float(rh)}
        for (a, b, lam, _), r, rl, rh in zip(cells, ratio, ratio_lo, ratio_hi)
    ]
    return Certificate(
        c_hat,
        c_upper,
        c_lower,
        {c: clean and bool(c_lower <= c) for c in c_grid},
        {c: clean and bool(c_upper <= c) for c in c_grid},
        table,
        untestable,
    )


def certify_time_slices(slices: Sequence[FieldSamples], s: SemimetricSample, **kwargs) -> dict:
    """Certify each time slice; the family verdict is the worst slice."""
    certs = [certify_nearly_subgaussian(f, s, **kwargs) for f in slices]
    keys = certs[0].pass_at.keys()
    return {
        "c_hat": max(c.c_hat for c in certs),
        "c_lower": max(c.c_lower for c in certs),
        "c_upper": max(c.c_upper for c in certs),
        "pass_at": {str(k): all(c.pass_at[k] for c in certs) for k in keys},
        "n_slices": len(certs),
    }


def sup_field_tail(f: FieldSamples, theta_bar: int, p_grid: Sequence[float] = (0.5, 1.0, 2.0)) -> dict:
    """U = max_theta |X^theta - X^theta_bar| and empirical E exp(p U) with standard errors."""
    X = f.values
    if not 0 <= theta_bar < X.shape[0]:
        raise SpaceError("theta_bar must index a point of the field")
    u = np.abs(X - X[theta_bar]).max(axis=0)
    # the supremum is dominated by U + X^theta_bar sample by sample
    assert (X.max(axis=0) <= u + X[theta_bar] + 1e-12).all()
    moments = {}
    for p in p_grid:
        e = np.exp(p * u)
        se = float(e.std(ddof=1) / math.sqrt(len(e))) if len(e) > 1 else 0.0
        moments[float(p)] = {"estimate": float(e.mean()), "stderr": se}
    return {"u_samples": u, "exp_moment": moments}


def path_modulus(f: FieldSamples, s: SemimetricSample, delta_grid: Sequence[float]) -> list[float]:
    """omega(delta) = max over samples and pairs with d <= delta of |X^a - X^b|."""
    X = f.values
    n = X.shape[0]
    gaps = np.zeros((n, n))
    for a in range(n):
        gaps[a] = np.abs(X - X[a]).max(axis=1)
    return [float(gaps[s.dist <= delta].max(initial=0.0)) for delta in delta_grid]
