"""Discretized stochastic-integral fields and Girsanov density families.

Drivers are simulated in fixed blocks of paths; block ``b`` draws from
``SeedSequence(seed, spawn_key=(b,))``, so the output depends only on the
master seed and never on the number of worker threads.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import norm

from .entropy import FieldSamples, SemimetricSample
from .measures import MeasureFamily, family
from .tree import ScenarioTree, from_labels

BLOCK_SIZE = 4096
_LOG_MAX = 709.0


class GirsanovError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DriverPaths:
    times: np.ndarray  # (K+1,)
    dz: np.ndarray  # (M, K)
    v: np.ndarray  # (M, K), V at the left end of each step
    seed: int | None = None

    @property
    def n_paths(self) -> int:
        return self.dz.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dz.shape[1]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    def z(self) -> np.ndarray:
        """Brownian paths Z_{u_k}, shape (M, K+1)."""
        return np.concatenate([np.zeros((self.n_paths, 1)), np.cumsum(self.dz, axis=1)], axis=1)


def _check_increments(dz: np.ndarray, dt: np.ndarray, n_sigma: float = 5.0) -> None:
    u = dz / np.sqrt(dt)
    n = u.size
    if n < 2:
        return
    mean, var = float(u.mean()), float(u.var())
    if abs(mean) * math.sqrt(n) > n_sigma:
        raise GirsanovError(f"increment mean {mean:.3g} is more than {n_sigma} sigma from 0")
    if abs(var - 1) / math.sqrt(2 / n) > n_sigma:
        raise GirsanovError(f"normalized increment variance {var:.4f} is more than {n_sigma} sigma from 1")


def _block(seed: int, b: int, rows: int, dt: np.ndarray, vol: dict) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    dz = rng.standard_normal((rows, len(dt))) * np.sqrt(dt)
    logv = np.empty_like(dz)
    logv[:, 0] = math.log(vol.get("v0", 1.0))
    if vol.get("kind", "constant") == "constant":
        logv[:, 1:] = logv[:, [0]]
    else:
        phi, eta = vol.get("phi", 0.9), vol.get("eta", 0.5)
        for k in range(1, len(dt)):
            logv[:, k] = phi * logv[:, k - 1] + eta * dz[:, k - 1]
    return dz, np.exp(logv)


def simulate_drivers(
    steps: int,
    paths: int,
    seed: int = 0,
    horizon: float = 1.0,
    vol: dict | None = None,
    threads: int = 1,
    v_table: np.ndarray | None = None,
) -> DriverPaths:
    """Brownian increments on a uniform grid plus a volatility path V.

    ``vol`` is ``{"kind": "constant", "v0": 1}`` or ``{"kind": "ar", "v0",
    "phi", "eta"}`` with log V_{k+1} = phi log V_k + eta dZ_k.  A user table
    of shape (paths, steps) overrides it.
    """
    if steps < 1 or paths < 1:
        raise GirsanovError("need at least one step and one path")
    vol = dict(vol or {"kind": "constant", "v0": 1.0})
    if vol.get("kind", "constant") not in ("constant", "ar"):
        raise GirsanovError(f"unknown volatility kind {vol.get('kind')!r}")
    times = np.linspace(0.0, horizon, steps + 1)
    dt = np.diff(times)
    starts = list(range(0, paths, BLOCK_SIZE))
    jobs = [(seed, b, min(BLOCK_SIZE, paths - s), dt, vol) for b, s in enumerate(starts)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        parts = list(ex.map(lambda a: _block(*a), jobs))
    dz = np.vstack([p[0] for p in parts])
    v = np.vstack([p[1] for p in parts])
    if v_table is not None:
        v = np.asarray(v_table, dtype=float)
        if v.shape != dz.shape:
            raise GirsanovError("volatility table must have shape (paths, steps)")
    _check_increments(dz, dt)
    return DriverPaths(times, dz, v, seed)


@dataclass(frozen=True, eq=False)
class PsiFunction:
    ident: str
    evaluator: Callable[[float, np.ndarray], np.ndarray]
    sup_sq: Callable[[float], float]  # declared sup_x int_0^T psi^2 du
    x_dependent: bool = False

    def __call__(self, t: float, x) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self.evaluator(t, np.asarray(x, dtype=float)), dtype=float), np.shape(x))
        if not np.isfinite(out).all():
            raise GirsanovError(f"psi {self.ident} produced non-finite values at t={t}")
        return out

    def spot_check(self, horizon: float, x_grid: np.ndarray, n_t: int = 201) -> bool:
        """Compare the declared bound with a trapezoid estimate on a grid."""
        t = np.linspace(0, horizon, n_t)
        vals = np.stack([self(ti, x_grid) for ti in t]) ** 2
        return bool(np.trapezoid(vals, t, axis=0).max() <= self.sup_sq(horizon) * (1 + 1e-3) + 1e-9)


def _floats(args: str, n: int, ident: str) -> list[float]:
    try:
        out = [float(a) for a in args.split(",")]
    except ValueError:
        raise GirsanovError(f"bad parameters in psi id {ident!r}") from None
    if len(out) != n:
        raise GirsanovError(f"psi id {ident!r} needs {n} parameter(s)")
    return out


def parse_psi(ident: str, base_dir: Path | None = None) -> PsiFunction:
    """Built-in evaluators: ``const:c``, ``linear:a,b`` (a + b t),
    ``tanh:a,b`` (a tanh(b x)) and ``table:file``."""
    kind, _, args = ident.partition(":")
    if kind == "const":
        (c,) = _floats(args, 1, ident)
        return PsiFunction(ident, lambda t, x: np.full(np.shape(x), c), lambda T: c * c * T)
    if kind == "linear":
        a, b = _floats(args, 2, ident)
        return PsiFunction(
            ident, lambda t, x: np.full(np.shape(x), a + b * t), lambda T: a * a * T + a * b * T**2 + b * b * T**3 / 3
        )
    if kind == "tanh":
        a, b = _floats(args, 2, ident)
        return PsiFunction(ident, lambda t, x: a * np.tanh(b * x), lambda T: a * a * T, x_dependent=True)
    if kind == "table":
        path = Path(args)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        try:
            spec = json.loads(path.read_text())
            tg, xg = np.asarray(spec["t"], float), np.asarray(spec["x"], float)
            vals = np.asarray(spec["values"], float)
        except (OSError, KeyError, ValueError) as e:
            raise GirsanovError(f"cannot read psi table {path}: {e}") from None
        if vals.shape != (len(tg), len(xg)) or not np.isfinite(vals).all():
            raise GirsanovError("psi table values must be finite with shape (len(t), len(x))")
        interp = RegularGridInterpolator((tg, xg), vals, bounds_error=False, fill_value=None)
        top = float(np.abs(vals).max())

        def ev(t, x):
            tt = np.clip(t, tg[0], tg[-1])
            xx = np.clip(x, xg[0], xg[-1])
            pts = np.stack(np.broadcast_arrays(np.full(np.shape(xx), tt), xx), axis=-1)
            return interp(pts)

        return PsiFunction(ident, ev, lambda T: top * top * T, x_dependent=len(xg) > 1)
    raise GirsanovError(f"unknown psi evaluator {ident!r}")


def d_psi(psi: PsiFunction, phi: PsiFunction, x_grid, t_grid, rule: str = "trapezoid") -> float:
    """sup over x_grid of sqrt(int (psi - phi)^2(u, x) du) on t_grid."""
    x = np.atleast_1d(np.asarray(x_grid, dtype=float))
    t = np.asarray(t_grid, dtype=float)
    if x.size == 0 or t.size == 0:
        raise GirsanovError("grids must be nonempty")
    sq = np.stack([(psi(ti, x) - phi(ti, x)) ** 2 for ti in t])
    if rule == "trapezoid":
        integral = np.trapezoid(sq, t, axis=0) if t.size > 1 else np.zeros(x.size)
    elif rule == "left":
        integral = (sq[:-1] * np.diff(t)[:, None]).sum(axis=0)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return float(np.sqrt(integral.max()))


def psi_matrix(psis: Sequence[PsiFunction], x_grid, t_grid, rule: str = "trapezoid") -> np.ndarray:
    n = len(psis)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = d_psi(psis[i], psis[j], x_grid, t_grid, rule)
    return d


def _integrand(psi: PsiFunction, d: DriverPaths) -> np.ndarray:
    return np.stack([psi(d.times[k], d.v[:, k]) for k in range(d.n_steps)], axis=1)


def stochastic_integral(psi: PsiFunction, d: DriverPaths) -> np.ndarray:
    """Left-endpoint Ito sums, shape (M, K+1) with X_0 = 0."""
    incr = _integrand(psi, d) * d.dz
    return np.concatenate([np.zeros((d.n_paths, 1)), np.cumsum(incr, axis=1)], axis=1)


def quadratic_variation(psi: PsiFunction, d: DriverPaths) -> np.ndarray:
    incr = _integrand(psi, d) ** 2 * d.dt
    return np.concatenate([np.zeros((d.n_paths, 1)), np.cumsum(incr, axis=1)], axis=1)


@dataclass(frozen=True, eq=False)
class DensityProcess:
    m: np.ndarray  # (M, K+1), raw stochastic exponential
    log_m: np.ndarray
    raw_mean: float
    raw_stderr: float
    factor: float

    @property
    def terminal(self) -> np.ndarray:
        """Terminal density renormalized to sample mean exactly 1."""
        return self.m[:, -1] * self.factor

    def report(self) -> dict:
        return {"raw_mean": self.raw_mean, "raw_stderr": self.raw_stderr, "factor": self.factor}


def density_process(psi: PsiFunction, d: DriverPaths) -> DensityProcess:
    x = stochastic_integral(psi, d)
    qv = quadratic_variation(psi, d)
    log_m = x - qv / 2
    if log_m.max() > _LOG_MAX:
        p, k = np.unravel_index(int(np.argmax(log_m)), log_m.shape)
        raise OverflowError(f"density of {psi.ident} overflows on path {p} at step {k}")
    m = np.exp(log_m)
    mk = m[:, -1]
    raw = float(mk.mean())
    se = float(mk.std(ddof=1) / math.sqrt(len(mk))) if len(mk) > 1 else 0.0
    return DensityProcess(m, log_m, raw, se, 1.0 / raw)


def drift_check(density: np.ndarray, z_terminal: np.ndarray, expected: float, n_sigma: float = 3.0) -> dict:
    """E_Q[Z_T] from the weighted sample against the Girsanov shift."""
    w = density * z_terminal
    est = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(len(w)))
    return {"estimate": est, "stderr": se, "expected": expected, "ok": abs(est - expected) <= n_sigma * se}


def qv_cauchy_schwarz(
    psis: Sequence[PsiFunction], d: DriverPaths, dmat: np.ndarray, theta_bar: int = 0, tol: float = 1e-9
) -> bool:
    """|[X^a]_t - [X^b]_t| <= (d(a, bar) + d(b, bar)) d(a, b) on every path and time."""
    qvs = [quadratic_variation(p, d) for p in psis]
    for a in range(len(psis)):
        for b in range(a + 1, len(psis)):
            bound = (dmat[a, theta_bar] + dmat[b, theta_bar]) * dmat[a, b]
            if np.abs(qvs[a] - qvs[b]).max() > bound + tol:
                return False
    return True


def quantized_tree(d: DriverPaths, bins: int = 2) -> ScenarioTree:
    """Uniform P over simulated paths; level k knows the bin of each of the
    first k increments (bins from equiprobable normal quantiles); the last
    level separates every path."""
    if bins < 1:
        raise GirsanovError("bins must be positive")
    M, K = d.dz.shape
    edges = norm.ppf(np.arange(1, bins) / bins)
    codes = np.stack([np.searchsorted(edges, d.dz[:, k] / math.sqrt(d.dt[k])) for k in range(K)], axis=1)
    parts = [np.zeros(M, dtype=int)]
    for k in range(1, K):
        _, inv = np.unique(codes[:, :k], axis=0, return_inverse=True)
        parts.append(inv.ravel())
    parts.append(np.arange(M))
    return from_labels(np.vstack(parts), np.full(M, 1.0 / M), paths=[f"w{i}" for i in range(M)], times=d.times)


@dataclass
class GirsanovFamily:
    tree: ScenarioTree
    family: MeasureFamily
    space: SemimetricSample
    fields: FieldSamples
    densities: list[DensityProcess]
    drivers: DriverPaths
    x_grid: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def default_x_grid(d: DriverPaths, n: int = 21) -> np.ndarray:
    return np.linspace(float(d.v.min()), float(d.v.max()), n)


def family_from_psis(
    psis: Sequence[PsiFunction],
    d: DriverPaths,
    bins: int = 2,
    theta_bar: int = 0,
    x_grid=None,
    t_fine: int = 1001,
) -> GirsanovFamily:
    if not psis:
        raise GirsanovError("need at least one psi")
    if len(psis) < 2:
        warnings.warn("a single psi gives a singleton family", stacklevel=2)
    x_grid = default_x_grid(d) if x_grid is None else np.asarray(x_grid, dtype=float)
    # the simulated field is a left-point sum on the driver grid, so its
    # semimetric uses the same rule; the fine trapezoid value is a diagnostic
    dmat = psi_matrix(psis, x_grid, d.times, rule="left")
    d_fine = psi_matrix(psis, x_grid, np.linspace(d.times[0], d.times[-1], t_fine))
    space = SemimetricSample(tuple(p.ident for p in psis), dmat)
    dens = [density_process(p, d) for p in psis]
    tree = quantized_tree(d, bins)
    fam = family(tree, np.stack([dp.terminal for dp in dens]), labels=[p.ident for p in psis])
    xs = np.stack([stochastic_integral(p, d)[:, -1] for p in psis])
    x_bar = stochastic_integral(psis[theta_bar], d)
    diag = {
        "renormalization": [dp.report() for dp in dens],
        "sup_t_exp_2x_bar": float(np.exp(2 * x_bar).mean(axis=0).max()),
        "declared_bounds_hold": [p.spot_check(d.horizon, x_grid) for p in psis],
        "qv_cauchy_schwarz": qv_cauchy_schwarz(psis, d, dmat, theta_bar),
        "x_grid": {"min": float(x_grid[0]), "max": float(x_grid[-1]), "points": int(x_grid.size)},
        "t_grid_points": int(t_fine),
        "d_psi_continuum": d_fine.tolist(),
    }
    fields = FieldSamples(xs, seed=d.seed, generator="girsanov:X_T")
    return GirsanovFamily(tree, fam, space, fields, dens, d, x_grid, diag)
