"""Command-line front end.

Every subcommand writes one JSON report with a shared envelope
(``schema_version``, ``command``, resolved ``config``, ``versions``, ``ok``
and the ``report`` body).  Exit codes: 0 when every internal cross-check
passes, 1 when one fails, 2 on input errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import SCHEMA_VERSION, __version__
from .consistency import consistency_report
from .entropy import (
    SpaceError,
    certify_nearly_subgaussian,
    covering_number,
    covering_profile,
    dudley_integral,
    rescale_factor,
)
from .girsanov import GirsanovError, family_from_psis, parse_psi, simulate_drivers
from .io import (
    InputError,
    load_json,
    read_family,
    read_field,
    read_payoff,
    read_space,
    read_tree,
    space_to_config,
    tree_to_config,
    write_field,
    write_json,
)
from .measures import MeasureError
from .snell import duality
from .stopping import EnumerationCapExceeded, PayoffProcess, PolicyError, StoppingPolicy, pure_policy
from .tree import NullNodeError, TreeError

SEED_ENV = "ROBUSTSTOP_SEED"
INPUT_ERRORS = (InputError, TreeError, MeasureError, SpaceError, GirsanovError, PolicyError, NullNodeError)


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def parse_grid(text: str | None) -> list[float] | None:
    """``a:b:step`` (inclusive) or a comma list."""
    if text is None:
        return None
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(math.floor((b - a) / step + 1e-9)) + 1
            return [round(a + i * step, 12) for i in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse grid {text!r}; use a:b:step or a comma list") from None


def _write_csv(directory: str | None, name: str, header: Sequence[str], rows) -> None:
    if directory is None:
        return
    Path(directory).mkdir(parents=True, exist_ok=True)
    with open(Path(directory) / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---- stages -----------------------------------------------------------------


def duality_stage(tree, y, fam, args) -> tuple[dict, bool]:
    rep = duality(
        tree,
        y,
        fam,
        cap=args.cap,
        lambda_grid=parse_grid(args.lambda_grid),
        cut_tol=args.cut_tol,
        lp_tol=args.lp_tol,
    )
    body = rep.to_dict()
    _write_csv(
        args.emit_csv,
        "duality_weights",
        ["member", "weight"],
        list(zip(fam.labels or range(len(fam)), body["argmin_weights"])),
    )
    return body, rep.ok


def _replayable(check: dict | None) -> bool:
    return check is None or check["holds"] or check["witness"] is not None


def consistency_stage(fam, args, taus=None) -> tuple[dict, bool]:
    rep = consistency_report(fam, taus=taus, tol=args.tol, hull_samples=args.hull_samples, seed=args.seed)
    body = rep.to_dict()
    ok = all(_replayable(body[k]) for k in ("pasting_stable", "time_consistent", "recursive", "statement2", "statement3"))
    _write_csv(
        args.emit_csv,
        "consistency",
        ["check", "holds"],
        [(k, body[k]["holds"]) for k in ("pasting_stable", "time_consistent", "recursive", "statement2", "statement3") if body[k]],
    )
    return body, ok


def entropy_stage(space, eps: Sequence[float], delta: float | None, method: str, csv_dir=None) -> tuple[dict, bool]:
    covers = []
    for e in eps:
        if e <= 0:
            raise InputError("eps values must be positive")
        c = covering_number(space, e, method)
        covers.append({"eps": e, "n": c.size, "exact": c.exact, "centres": list(c.centres)})
    bps, counts, exact = covering_profile(space, method)
    body = {
        "n_points": len(space),
        "diameter": space.diameter,
        "covering_numbers": covers,
        "profile": {"breakpoints": bps.tolist(), "counts": counts, "exact": exact},
        "rescale_factor": {"1": rescale_factor(1.0), "2": rescale_factor(2.0)},
    }
    if delta is not None:
        if delta <= 0:
            raise InputError("dudley delta must be positive")
        body["dudley"] = {"delta": delta, "value": dudley_integral(space, delta, method)}
    _write_csv(csv_dir, "covering_profile", ["eps_from", "n"], zip(bps.tolist(), counts))
    return body, True


def certify_stage(fld, space, args) -> tuple[dict, bool]:
    cs = sorted(set(args.C))
    cert = certify_nearly_subgaussian(
        fld,
        space,
        lambda_grid=parse_grid(args.lambda_grid) or (0.25, 0.5, 1.0, 2.0, 4.0),
        confidence=args.confidence,
        c_grid=cs,
        n_boot=args.boot,
        seed=args.seed,
    )
    body = cert.to_dict()
    body["confidence"] = args.confidence
    body["n_samples"] = fld.n_samples
    _write_csv(
        args.emit_csv,
        "certify_cells",
        ["a", "b", "lambda", "ratio", "lower", "upper"],
        [(c["pair"][0], c["pair"][1], c["lambda"], c["ratio"], c["lower"], c["upper"]) for c in cert.cells],
    )
    return body, all(cert.pass_at.values())


def _load_psis(path) -> tuple[list, dict]:
    cfg = load_json(path)
    if not isinstance(cfg, dict) or not isinstance(cfg.get("psis"), list) or not cfg["psis"]:
        raise InputError(f"{path}: needs a nonempty 'psis' list of evaluator ids")
    base = Path(path).parent
    return [parse_psi(str(p), base) for p in cfg["psis"]], dict(cfg.get("volatility") or {"kind": "constant", "v0": 1.0})


def girsanov_stage(psis, vol, args):
    drivers = simulate_drivers(args.steps, args.paths, seed=args.seed, horizon=args.horizon, vol=vol, threads=args.threads)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = family_from_psis(psis, drivers, bins=args.bins)
    renorm = g.diagnostics["renormalization"]
    body = {
        "n_paths": drivers.n_paths,
        "n_steps": drivers.n_steps,
        "labels": [p.ident for p in psis],
        "space": space_to_config(g.space),
        "nodes_per_level": [g.tree.n_nodes(k) for k in range(g.tree.depth + 1)],
        "diagnostics": g.diagnostics,
    }
    # the raw terminal mean must sit within 5 standard errors of 1
    ok = (
        g.diagnostics["qv_cauchy_schwarz"]
        and all(g.diagnostics["declared_bounds_hold"])
        and all(abs(r["raw_mean"] - 1) <= 5 * r["raw_stderr"] + 1e-12 for r in renorm)
    )
    _write_csv(
        args.emit_csv,
        "renormalization",
        ["psi", "raw_mean", "raw_stderr", "factor"],
        [(p.ident, r["raw_mean"], r["raw_stderr"], r["factor"]) for p, r in zip(psis, renorm)],
    )
    return g, body, bool(ok)


def artifact_for(g, config: dict) -> dict:
    return {
        "kind": "girsanov_family",
        "schema_version": SCHEMA_VERSION,
        "tree": tree_to_config(g.tree),
        "labels": list(g.family.labels),
        "densities": g.family.densities.tolist(),
        "space": space_to_config(g.space),
        "config": config,
    }


def put_payoff(tree, z: np.ndarray, strike: float = 1.0) -> PayoffProcess:
    """Node averages of max(K - S, 0) with S = exp(Z - t/2), adapted to the tree."""
    t = np.asarray(tree.times)
    raw = np.maximum(strike - np.exp(z - t / 2), 0.0).T  # (K+1, M)
    y = np.empty_like(raw)
    p = np.asarray(tree.p, dtype=float)
    for k in range(tree.depth + 1):
        lab = tree.node_of[k]
        num = np.bincount(lab, weights=raw[k] * p)
        den = np.bincount(lab, weights=p)
        y[k] = (num / den)[lab]
    return PayoffProcess(tree, y)


# ---- subcommands ------------------------------------------------------------


def cmd_duality(args):
    tree = read_tree(args.tree, args.exact) if args.tree else None
    tree, fam = read_family(args.family, tree, args.exact)
    y = read_payoff(args.payoff, tree, args.exact)
    return duality_stage(tree, y, fam, args)


def _read_taus(path, tree) -> list[StoppingPolicy]:
    cfg = load_json(path)
    rows = cfg.get("taus") if isinstance(cfg, dict) else cfg
    if not isinstance(rows, list) or not rows:
        raise InputError(f"{path}: needs a nonempty list of stop-time vectors")
    return [pure_policy(tree, r) for r in rows]


def cmd_consistency(args):
    tree = read_tree(args.tree, args.exact) if args.tree else None
    tree, fam = read_family(args.family, tree, args.exact)
    taus = None if args.taus == "all" else _read_taus(args.taus, tree)
    return consistency_stage(fam, args, taus)


def cmd_entropy(args):
    space = read_space(args.space)
    eps = parse_grid(args.eps) or []
    if not eps and args.dudley is None:
        raise InputError("give --eps and/or --dudley")
    return entropy_stage(space, eps, args.dudley, args.method, args.emit_csv)


def cmd_certify(args):
    fld = read_field(args.field)
    space = read_space(args.space)
    if fld.values.shape[0] != len(space):
        raise InputError(f"field has {fld.values.shape[0]} rows but the space has {len(space)} points")
    return certify_stage(fld, space, args)


def cmd_girsanov(args):
    psis, vol = _load_psis(args.psis)
    g, body, ok = girsanov_stage(psis, vol, args)
    family_out, field_out = args.out
    write_json(family_out, artifact_for(g, _config(args)))
    write_field(field_out, g.fields, points=[p.ident for p in psis])
    body["outputs"] = {"family": str(family_out), "field": str(field_out)}
    return body, ok


def cmd_pipeline(args):
    if args.psis:
        psis, vol = _load_psis(args.psis)
    else:
        psis, vol = [parse_psi("const:0"), parse_psi("const:0.5")], {"kind": "constant", "v0": 1.0}
    stages, oks = {}, {}
    complete = True
    try:
        g, stages["girsanov"], oks["girsanov"] = girsanov_stage(psis, vol, args)
        stages["entropy"], oks["entropy"] = entropy_stage(g.space, [], max(g.space.diameter, 1e-12), "auto", args.emit_csv)
        stages["certify"], oks["certify"] = certify_stage(g.fields, g.space, args)
        if args.family:
            tree = read_tree(args.tree, args.exact) if args.tree else None
            tree, fam = read_family(args.family, tree, args.exact)
            if not args.payoff:
                raise InputError("--payoff is required with --family")
            y = read_payoff(args.payoff, tree, args.exact)
        else:
            tree, fam = g.tree, g.family
            y = put_payoff(tree, g.drivers.z())
        stages["duality"], oks["duality"] = duality_stage(tree, y, fam, args)
        stages["consistency"], oks["consistency"] = consistency_stage(fam, args)
    except (EnumerationCapExceeded, ArithmeticError) as exc:
        complete = False
        stages["error"] = str(exc)
    body = {"complete": complete, "stages": stages, "stage_ok": oks}
    return body, complete and all(oks.values())


# ---- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-report", "-o", help="write the JSON report here instead of stdout")
    p.add_argument("--emit-csv", metavar="DIR", help="also dump tables as CSV files into DIR")
    p.add_argument("--threads", type=int, default=1, help="worker bound; results do not depend on it")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    p.add_argument("--timings", action="store_true", help="add wall-clock timings to the report")


def _family_args(p, tree_required: bool = False) -> None:
    p.add_argument("--tree", required=tree_required, help="tree description JSON")
    p.add_argument("--family", required=True, help="family JSON (densities, rectangular or girsanov_ref)")
    p.add_argument("--exact", action="store_true", help="rational arithmetic")


def _duality_args(p) -> None:
    p.add_argument("--lambda-grid", default=None, help="condition (A) grid, e.g. 0.1:0.9:0.1")
    p.add_argument("--cap", type=int, default=200_000, help="pure-policy enumeration cap")
    p.add_argument("--cut-tol", type=float, default=1e-9)
    p.add_argument("--lp-tol", type=float, default=1e-7)


def _consistency_args(p) -> None:
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--hull-samples", type=int, default=4)


def _certify_args(p) -> None:
    p.add_argument("--C", type=float, action="append", default=None, help="constant(s) to test, default 2")
    p.add_argument("--confidence", type=float, default=0.99)
    p.add_argument("--boot", type=int, default=1000, help="bootstrap resamples")


def _girsanov_args(p) -> None:
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--paths", type=int, default=2000)
    p.add_argument("--bins", type=int, default=2)
    p.add_argument("--horizon", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robuststop", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("duality", help="minimax values and their cross-checks")
    _family_args(p)
    p.add_argument("--payoff", required=True, help="payoff JSON")
    _duality_args(p)
    _common(p)
    p.set_defaults(func=cmd_duality)

    p = sub.add_parser("consistency", help="pasting, recursiveness and time-consistency checks")
    _family_args(p)
    p.add_argument("--taus", default="all", help="'all' or a JSON file of stop-time vectors")
    _consistency_args(p)
    _common(p)
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("entropy", help="covering numbers and the Dudley integral")
    p.add_argument("--space", required=True)
    p.add_argument("--eps", default=None, help="radii, e.g. 0.1,0.2 or 0.1:0.5:0.1")
    p.add_argument("--dudley", type=float, default=None, metavar="DELTA")
    p.add_argument("--method", choices=("auto", "exact", "greedy"), default="auto")
    _common(p)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("certify", help="empirical nearly sub-Gaussian certificate")
    p.add_argument("--field", required=True, help="binary field file with a .json sidecar")
    p.add_argument("--space", required=True)
    p.add_argument("--lambda-grid", default=None)
    _certify_args(p)
    _common(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("girsanov", help="simulate a density family from psi evaluators")
    p.add_argument("--psis", required=True)
    _girsanov_args(p)
    p.add_argument("--out", nargs=2, required=True, metavar=("FAMILY_JSON", "FIELD_BIN"))
    _common(p)
    p.set_defaults(func=cmd_girsanov)

    p = sub.add_parser("pipeline", help="girsanov, entropy, certify, duality and consistency in one run")
    p.add_argument("--psis", default=None, help="psi set (default constants 0 and 0.5)")
    _girsanov_args(p)
    p.add_argument("--tree", default=None)
    p.add_argument("--family", default=None, help="run duality and consistency on this family instead")
    p.add_argument("--payoff", default=None)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--lambda-grid", default=None)
    p.add_argument("--cap", type=int, default=200_000)
    p.add_argument("--cut-tol", type=float, default=1e-9)
    p.add_argument("--lp-tol", type=float, default=1e-7)
    _consistency_args(p)
    _certify_args(p)
    _common(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "timings", "out_report", "threads")}


def _finalize_args(args) -> None:
    if args.seed is None:
        args.seed = default_seed()
    if hasattr(args, "C") and args.C is None:
        args.C = [2.0]
    if args.threads < 1:
        raise InputError("--threads must be at least 1")


def run(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    start = time.perf_counter()
    try:
        _finalize_args(args)
        body, ok = args.func(args)
    except INPUT_ERRORS as exc:
        print(f"robuststop {args.command}: input error: {exc}", file=sys.stderr)
        return 2
    except EnumerationCapExceeded as exc:
        print(f"robuststop {args.command}: {exc}", file=sys.stderr)
        return 2
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "config": _config(args),
        "versions": {"robuststop": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "ok": bool(ok),
        "report": body,
    }
    if args.timings:
        report["timings"] = {"total_seconds": time.perf_counter() - start}
    text = json.dumps(report, indent=2, sort_keys=True, default=_default) + "\n"
    if args.out_report:
        Path(args.out_report).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if ok else 1


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "denominator"):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
