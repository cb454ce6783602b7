"""Snell envelopes and the two sides of the robust stopping minimax problem.

The lower value is ``max_tau min_Q E_Q[Y_tau]`` over pure stopping times;
the upper value is ``min_{Q in co(family)} max_tau E_Q[Y_tau]``.  Two
independent routes compute the upper value: a cutting-plane method that only
ever calls backward induction at mixture measures, and the linear program of
the matrix game whose rows are all pure stopping times.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from ._numeric import tie_tol
from .measures import Measure, MeasureFamily, box_vertices, stopped_atoms
from .stopping import (
    EnumerationCapExceeded,
    PayoffProcess,
    PolicyError,
    StoppingPolicy,
    constant_policy,
    enumerate_pure_policies,
    mixture_policy,
    policy_from_indicators,
)
from .tree import NodeFunction, ScenarioTree, conditional_expectation

log = logging.getLogger(__name__)

DEFAULT_POLICY_CAP = 200_000
_HIGHS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class SolverError(RuntimeError):
    pass


@dataclass
class SnellResult:
    values: list[NodeFunction]
    policy: StoppingPolicy
    null_nodes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def root(self):
        return self.values[0].values[0]


def _density(q) -> np.ndarray:
    return q.density if isinstance(q, Measure) else np.asarray(q)


def snell_envelope(tree: ScenarioTree, y: PayoffProcess, q) -> SnellResult:
    """Backward induction U_K = Y_K, U_k = max(Y_k, E_q[U_{k+1} | F_k]).

    Ties stop early.  Nodes of zero q-mass get continuation value 0 and are
    reported in ``null_nodes``.
    """
    density = tree.convert(_density(q))
    K = tree.depth
    tol = tie_tol(tree.exact)
    values: list[NodeFunction] = [None] * (K + 1)  # type: ignore[list-item]
    stop: list[np.ndarray] = [None] * (K + 1)  # type: ignore[list-item]
    values[K] = NodeFunction(K, y.node_values(K))
    stop[K] = np.ones(tree.n_nodes(K), dtype=int)
    nulls = []
    u_next = y.y[K]
    for k in range(K - 1, -1, -1):
        cont = conditional_expectation(tree, density, u_next, k, null="zero")
        nulls.extend((k, n) for n in cont.null_nodes)
        yk = y.node_values(k)
        stop[k] = np.array([1 if a >= c - tol else 0 for a, c in zip(yk, cont.values)], dtype=int)
        vals = np.array([max(a, c) for a, c in zip(yk, cont.values)], dtype=yk.dtype)
        values[k] = NodeFunction(k, vals, cont.null_nodes)
        u_next = tree.lift(k, vals)
    return SnellResult(values, policy_from_indicators(tree, stop), nulls)


def lower_snell_envelope(tree: ScenarioTree, y: PayoffProcess, fam: MeasureFamily) -> list[NodeFunction]:
    """Nodewise minimum over the listed members of their Snell envelopes."""
    per_member = [snell_envelope(tree, y, m).values for m in fam.members]
    out = []
    for k in range(tree.depth + 1):
        stacked = np.vstack([vals[k].values for vals in per_member])
        out.append(NodeFunction(k, np.array([min(col) for col in stacked.T], dtype=stacked.dtype)))
    return out


def payoff_matrix(tree: ScenarioTree, y: PayoffProcess, fam: MeasureFamily, stop_times: np.ndarray) -> np.ndarray:
    """A[j, i] = E_{Q_i}[Y_{tau_j}] for policies given as rows of stop levels."""
    stopped = y.y[stop_times, np.arange(tree.n_paths)]
    return stopped @ (fam.densities * tree.p).T


def _argmax_first(values) -> int:
    best = 0
    for j, v in enumerate(values):
        if v > values[best]:
            best = j
    return best


@dataclass
class LowerPure:
    value: object
    policy: StoppingPolicy
    enumerated: bool
    n_policies: int


def candidate_policies(tree: ScenarioTree, y: PayoffProcess, fam: MeasureFamily, extra=()) -> np.ndarray:
    """Policies worth trying when full enumeration is out of reach."""
    rows = [constant_policy(tree, k).stop_times for k in range(tree.depth + 1)]
    rows += [snell_envelope(tree, y, m).policy.stop_times for m in fam.members]
    rows += [np.asarray(r) for r in extra]
    return np.unique(np.vstack(rows), axis=0)


def lower_value_pure(
    tree: ScenarioTree,
    y: PayoffProcess,
    fam: MeasureFamily,
    cap: int = DEFAULT_POLICY_CAP,
    heuristic: bool = False,
    extra_policies=(),
) -> LowerPure:
    """sup over pure tau of min over members of E_Q[Y_tau].

    Exhaustive over first-hit canonical policies when their number is within
    ``cap``.  Otherwise, with ``heuristic=True``, the maximum over candidate
    policies is returned as a lower bound (``enumerated=False``).
    """
    try:
        rows = enumerate_pure_policies(tree, cap)
        enumerated = True
    except EnumerationCapExceeded:
        if not heuristic:
            raise
        rows = candidate_policies(tree, y, fam, extra_policies)
        enumerated = False
    A = payoff_matrix(tree, y, fam, rows)
    worst = [min(row) for row in A]
    j = _argmax_first(worst)
    return LowerPure(worst[j], StoppingPolicy(tree, "pure", stop_times=rows[j]), enumerated, len(rows))


def solve_matrix_game(A: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and optimal strategies of the zero-sum game max_x min_i (x^T A)_i.

    Rows belong to the maximizer.  Returns ``(value, x, w)`` with ``w`` the
    minimizer's mixture over columns, read off the LP duals.
    """
    A = np.asarray(A, dtype=float)
    J, n = A.shape
    c = np.zeros(J + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-A.T, np.ones((n, 1))])
    A_eq = np.zeros((1, J + 1))
    A_eq[0, :J] = 1.0
    bounds = [(0, None)] * J + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=[1.0], bounds=bounds,
                  method="highs", options=_HIGHS)
    if res.status != 0:
        raise SolverError(f"matrix game LP failed: {res.message}")
    x = np.clip(res.x[:J], 0, None)
    w = np.clip(-res.ineqlin.marginals, 0, None)
    return float(res.x[-1]), x / x.sum(), w / w.sum()


def _solve_exact(M: list[list[Fraction]], b: list[Fraction]) -> list[Fraction] | None:
    n = len(M)
    aug = [row[:] + [rhs] for row, rhs in zip(M, b)]
    for col in range(n):
        piv = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if piv is None:
            return None
        aug[col], aug[piv] = aug[piv], aug[col]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col] / aug[col][col]
                aug[r] = [a - f * c for a, c in zip(aug[r], aug[col])]
    return [aug[i][n] / aug[i][i] for i in range(n)]


def exact_game_value(A_exact: np.ndarray, x: np.ndarray, w: np.ndarray, thresh: float = 1e-9):
    """Certify the game value in rationals from the supports of a float solution.

    Solves the equalizing system on the supports exactly and verifies both
    strategies; returns ``None`` if the supports are degenerate or the
    certificate fails.
    """
    R = [j for j in range(len(x)) if x[j] > thresh]
    C = [i for i in range(len(w)) if w[i] > thresh]
    if len(R) != len(C):
        return None
    k = len(R)
    # unknowns: x_R (k) and v; equations: column payoffs equal v, mass 1
    M = [[A_exact[R[r], C[c]] for r in range(k)] + [Fraction(-1)] for c in range(k)]
    M.append([Fraction(1)] * k + [Fraction(0)])
    sol_x = _solve_exact(M, [Fraction(0)] * k + [Fraction(1)])
    M = [[A_exact[R[r], C[c]] for c in range(k)] + [Fraction(-1)] for r in range(k)]
    M.append([Fraction(1)] * k + [Fraction(0)])
    sol_w = _solve_exact(M, [Fraction(0)] * k + [Fraction(1)])
    if sol_x is None or sol_w is None or sol_x[-1] != sol_w[-1]:
        return None
    v = sol_x[-1]
    xs, ws = sol_x[:-1], sol_w[:-1]
    if any(t < 0 for t in xs) or any(t < 0 for t in ws):
        return None
    for i in range(A_exact.shape[1]):
        if sum(xs[r] * A_exact[R[r], i] for r in range(k)) < v:
            return None
    for j in range(A_exact.shape[0]):
        if sum(ws[c] * A_exact[j, C[c]] for c in range(k)) > v:
            return None
    return v


@dataclass
class LowerRandomized:
    value: float
    mixed_policy: StoppingPolicy
    row_weights: np.ndarray
    member_weights: np.ndarray
    enumerated: bool
    exact_value: Fraction | None = None


def lower_value_randomized(
    tree: ScenarioTree,
    y: PayoffProcess,
    fam: MeasureFamily,
    cap: int = DEFAULT_POLICY_CAP,
    rows: np.ndarray | None = None,
) -> LowerRandomized:
    """Value of the matrix game (pure policies x members) over row mixtures.

    With ``rows`` given (e.g. policies generated by the cutting-plane run)
    the game is restricted to them and the value is a lower bound unless the
    rows contain an optimal mixture.
    """
    enumerated = rows is None
    if rows is None:
        rows = enumerate_pure_policies(tree, cap)
    A = payoff_matrix(tree, y, fam, rows)
    value, x, w = solve_matrix_game(A.astype(float))
    exact_value = exact_game_value(A, x, w) if tree.exact else None
    return LowerRandomized(value, mixture_policy(tree, rows, x), x, w, enumerated, exact_value)


@dataclass
class UpperResult:
    value: float
    weights: np.ndarray
    lower_bound: float
    n_cuts: int
    converged: bool
    cut_policies: np.ndarray
    residual: float


def upper_value(
    tree: ScenarioTree,
    y: PayoffProcess,
    fam: MeasureFamily,
    tol: float = 1e-9,
    max_cuts: int = 10_000,
) -> UpperResult:
    """min over simplex weights of the Snell root at the mixture measure.

    Kelley's cutting-plane method: the root value f(w) is the maximum of the
    linear functions w -> sum_i w_i E_{Q_i}[Y_tau], and the optimal policy at
    the mixture supplies both f(w) and a subgradient.  Stops when the best
    value found is within ``tol`` of the master LP bound.
    """
    ftree = tree.as_float()
    fy = PayoffProcess(ftree, np.asarray(y.y, dtype=float))
    D = fam.densities.astype(float)
    n = len(fam)
    Q = D * ftree.p
    w = np.full(n, 1.0 / n)
    cuts: list[np.ndarray] = []
    policies: list[np.ndarray] = []
    best, best_w, lb = np.inf, w, -np.inf
    converged = False
    while len(cuts) < max_cuts:
        res = snell_envelope(ftree, fy, w @ D)
        tau = res.policy.stop_times
        g = Q @ fy.at(tau)
        f = float(g @ w)
        if f < best - 1e-15:
            best, best_w = f, w
        cuts.append(g)
        policies.append(tau)
        if n == 1:
            lb = best
            converged = True
            break
        G = np.vstack(cuts)
        c = np.zeros(n + 1)
        c[-1] = 1.0
        A_ub = np.hstack([G, -np.ones((len(G), 1))])
        A_eq = np.zeros((1, n + 1))
        A_eq[0, :n] = 1.0
        out = linprog(c, A_ub=A_ub, b_ub=np.zeros(len(G)), A_eq=A_eq, b_eq=[1.0],
                      bounds=[(0, None)] * n + [(None, None)], method="highs", options=_HIGHS)
        if out.status != 0:
            raise SolverError(f"cutting-plane master LP failed: {out.message}")
        w = np.clip(out.x[:n], 0, None)
        w = w / w.sum()
        lb = float((G @ w).max())
        if best - lb <= tol:
            converged = True
            break
    if not converged:
        log.warning("cutting plane stopped at %d cuts with residual %.3g", len(cuts), best - lb)
    return UpperResult(best, best_w, lb, len(cuts), converged, np.vstack(policies), best - lb)


@dataclass
class RobustSnell:
    values: list[NodeFunction]
    worst_case: list[np.ndarray]  # index of the minimizing vertex per node

    @property
    def root(self):
        return self.values[0].values[0]


def robust_snell_rectangular(tree: ScenarioTree, y: PayoffProcess, boxes) -> RobustSnell:
    """Backward induction with a nodewise worst-case conditional law.

    U_k(n) = max(Y_k(n), min_p sum_c p_c U_{k+1}(c)) with p ranging over the
    vertices of the box at node n.  ``boxes`` as for ``rectangular_family``,
    or a family built by it.
    """
    if isinstance(boxes, MeasureFamily):
        vertices = boxes.node_vertices
        if vertices is None:
            raise ValueError("family was not built from boxes")
    else:
        vertices = [[box_vertices(b, tree.exact) for b in level] for level in boxes]
    K = tree.depth
    values: list[NodeFunction] = [None] * (K + 1)  # type: ignore[list-item]
    worst: list[np.ndarray] = [None] * K  # type: ignore[list-item]
    values[K] = NodeFunction(K, y.node_values(K))
    for k in range(K - 1, -1, -1):
        nxt = values[k + 1].values
        yk = y.node_values(k)
        vals, arg = [], []
        for n in range(tree.n_nodes(k)):
            kids = tree.children(k, n)
            conts = [sum(p[c] * nxt[kid] for c, kid in enumerate(kids)) for p in vertices[k][n]]
            i = min(range(len(conts)), key=lambda t: (conts[t], t))
            arg.append(i)
            vals.append(max(yk[n], conts[i]))
        values[k] = NodeFunction(k, np.array(vals, dtype=yk.dtype))
        worst[k] = np.array(arg)
    return RobustSnell(values, worst)


def price_interval(tree: ScenarioTree, y: PayoffProcess, fam: MeasureFamily, upper: UpperResult | None = None) -> dict:
    """[pi_inf, pi_sup]: minimal Snell root over co(family), maximal over members."""
    if upper is None:
        upper = upper_value(tree, y, fam)
    roots = [snell_envelope(tree, y, m).root for m in fam.members]
    j = _argmax_first(roots)
    return {
        "pi_inf": upper.value,
        "pi_sup": roots[j],
        "argmax_member": j,
        "equivalent": fam.equivalent,
    }


def rho(x, fam: MeasureFamily):
    """sup over the family (equivalently its convex hull) of E_Q[x]."""
    x = fam.tree.convert(x)
    return max(m.expect(x) for m in fam.members)


@dataclass
class ConditionA:
    inf_value: object
    argmin_event: list[str]
    exact: bool
    n_atoms: int


def _check_nonzero(tau: StoppingPolicy) -> None:
    if not tau.is_pure:
        raise PolicyError("condition (A) uses pure stopping times")
    if (tau.stop_times == 0).all():
        raise PolicyError("stopping times must differ from the zero stopping time")


def condition_a_check(
    tree: ScenarioTree,
    y: PayoffProcess,
    fam: MeasureFamily,
    lam,
    tau1: StoppingPolicy,
    tau2: StoppingPolicy,
    mode: str = "exact",
    cap: int = 16,
) -> ConditionA:
    """inf over A in F_{tau1 ^ tau2} of rho((1_A - lam)(Y_tau2 - Y_tau1)).

    Exact mode scans every union of atoms of F_{tau1 ^ tau2}; greedy mode
    adds atoms while the objective decreases and returns an upper bound.
    """
    _check_nonzero(tau1)
    _check_nonzero(tau2)
    if not 0 < float(lam) < 1:
        raise ValueError("lambda must lie in (0, 1)")
    lam = tree.convert([lam])[0]
    sigma = np.minimum(tau1.stop_times, tau2.stop_times)
    atoms = stopped_atoms(tree, sigma)
    n_atoms = int(atoms.max()) + 1
    diff = y.at(tau2.stop_times) - y.at(tau1.stop_times)
    Q = (fam.densities * tree.p).T  # (N, members)

    def objective(chosen: np.ndarray):
        ind = chosen[atoms]
        x = np.where(ind, 1 - lam, -lam) * diff
        return max(x @ Q)

    if mode == "exact":
        if n_atoms > cap:
            raise ValueError(f"{n_atoms} atoms exceed the exact-mode cap {cap}")
        if not tree.exact and n_atoms > 4:
            bits = ((np.arange(2 ** n_atoms)[:, None] >> np.arange(n_atoms)) & 1).astype(bool)
            ind = bits[:, atoms]
            X = np.where(ind, 1 - lam, -lam) * diff
            vals = (X @ Q).max(axis=1)
            best = int(np.argmin(vals))
            best_val, best_mask = vals[best], bits[best]
        else:
            best_val, best_mask = None, None
            for combo in itertools.product((False, True), repeat=n_atoms):
                chosen = np.array(combo[::-1], dtype=bool)
                v = objective(chosen)
                if best_val is None or v < best_val:
                    best_val, best_mask = v, chosen
    elif mode == "greedy":
        best_mask = np.zeros(n_atoms, dtype=bool)
        best_val = objective(best_mask)
        improved = True
        while improved:
            improved = False
            for a in np.flatnonzero(~best_mask):
                trial = best_mask.copy()
                trial[a] = True
                v = objective(trial)
                if v < best_val:
                    best_val, best_mask, improved = v, trial, True
    else:
        raise ValueError(f"unknown mode {mode!r}")
    event = [tree.paths[i] for i in np.flatnonzero(best_mask[atoms])]
    return ConditionA(best_val, event, mode == "exact", n_atoms)


def nonzero_policies(tree: ScenarioTree, cap: int = DEFAULT_POLICY_CAP) -> list[StoppingPolicy]:
    rows = enumerate_pure_policies(tree, cap)
    return [StoppingPolicy(tree, "pure", stop_times=r) for r in rows if not (r == 0).all()]


def condition_a_scan(
    tree: ScenarioTree,
    y: PayoffProcess,
    fam: MeasureFamily,
    lambdas: Sequence[float],
    pairs: Sequence[tuple[StoppingPolicy, StoppingPolicy]] | None = None,
    tol: float = 1e-9,
) -> dict:
    """Worst inf-value over stopping pairs for each lambda on the grid."""
    if pairs is None:
        taus = nonzero_policies(tree)
        pairs = [(a, b) for a in taus for b in taus]
    table = []
    for lam in lambdas:
        worst, witness = -np.inf, None
        for i, (t1, t2) in enumerate(pairs):
            v = float(condition_a_check(tree, y, fam, lam, t1, t2).inf_value)
            if v > worst:
                worst, witness = v, i
        table.append({"lambda": float(lam), "max_inf_value": worst, "worst_pair": witness})
    holding = [row["lambda"] for row in table if row["max_inf_value"] <= tol]
    return {"table": table, "lambdas_holding": holding, "n_pairs": len(pairs), "holds": bool(holding)}


@dataclass
class DualityReport:
    lower_pure: float
    lower_randomized: float
    upper: float
    pi_inf: float
    pi_sup: float
    lower_pure_enumerated: bool
    lower_randomized_enumerated: bool
    argmax_policy: StoppingPolicy
    argmin_weights: np.ndarray
    mixed_policy: StoppingPolicy
    checks: dict
    diagnostics: dict
    exact_values: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.upper - self.lower_pure

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "lower_pure": float(self.lower_pure),
            "lower_randomized": float(self.lower_randomized),
            "upper": float(self.upper),
            "gap": float(self.gap),
            "pi_inf": float(self.pi_inf),
            "pi_sup": float(self.pi_sup),
            "lower_pure_enumerated": self.lower_pure_enumerated,
            "lower_randomized_enumerated": self.lower_randomized_enumerated,
            "argmax_policy": self.argmax_policy.to_dict(),
            "argmin_weights": [float(v) for v in self.argmin_weights],
            "mixed_policy": self.mixed_policy.to_dict(),
            "exact_values": {k: str(v) for k, v in self.exact_values.items()},
            "checks": self.checks,
            "diagnostics": self.diagnostics,
        }


def duality(
    tree: ScenarioTree,
    y: PayoffProcess,
    fam: MeasureFamily,
    cap: int = DEFAULT_POLICY_CAP,
    heuristic: bool = True,
    lambda_grid: Sequence[float] | None = None,
    cut_tol: float = 1e-9,
    lp_tol: float = 1e-7,
) -> DualityReport:
    """All minimax values for one instance plus their mutual cross-checks."""
    upper = upper_value(tree, y, fam, tol=cut_tol)
    try:
        rand = lower_value_randomized(tree, y, fam, cap)
    except EnumerationCapExceeded:
        if not heuristic:
            raise
        rows = np.unique(upper.cut_policies, axis=0)
        rand = lower_value_randomized(tree, y, fam, rows=rows)
    pure = lower_value_pure(tree, y, fam, cap, heuristic, extra_policies=upper.cut_policies)
    interval = price_interval(tree, y, fam, upper)
    lp, lr, up = float(pure.value), float(rand.value), float(upper.value)
    checks = {
        "ordering": lp <= lr + 1e-9 and lr <= up + 1e-9,
        "lp_matches_cutting_plane": abs(lr - up) <= lp_tol,
        "cutting_plane_converged": upper.converged,
        "pi_inf_le_pi_sup": float(interval["pi_inf"]) <= float(interval["pi_sup"]) + 1e-9,
    }
    if len(fam) == 1:
        root = float(snell_envelope(tree, y, fam[0]).root)
        checks["singleton_collapse"] = all(abs(v - root) <= 1e-9 for v in (lp, lr, up))
    diagnostics = {
        "atomless": tree.atomless,
        "equivalent_family": fam.equivalent,
        "pasting_closed_by_construction": fam.pasting_closed_by_construction,
        "y_star_integrable": True,
        "uniform_integrability": "automatic on a finite path space",
        "quasi_left_usc": "automatic on a finite time grid",
        "rho_continuous_from_above": "automatic on a finite path space",
        "n_members": len(fam),
        "n_cuts": upper.n_cuts,
        "cut_residual": upper.residual,
        "n_policies": pure.n_policies,
    }
    if lambda_grid is not None:
        try:
            diagnostics["condition_a"] = condition_a_scan(tree, y, fam, lambda_grid)
        except (EnumerationCapExceeded, ValueError) as exc:
            diagnostics["condition_a"] = {"skipped": str(exc)}
    exact_values = {}
    if tree.exact:
        exact_values["lower_pure"] = pure.value
        if rand.exact_value is not None:
            exact_values["lower_randomized"] = rand.exact_value
            checks["exact_game_certificate"] = abs(float(rand.exact_value) - up) <= lp_tol
    return DualityReport(
        lower_pure=pure.value,
        lower_randomized=rand.value,
        upper=upper.value,
        pi_inf=interval["pi_inf"],
        pi_sup=interval["pi_sup"],
        lower_pure_enumerated=pure.enumerated,
        lower_randomized_enumerated=rand.enumerated,
        argmax_policy=pure.policy,
        argmin_weights=upper.weights,
        mixed_policy=rand.mixed_policy,
        checks=checks,
        diagnostics=diagnostics,
        exact_values=exact_values,
    )
