"""Readers and writers for the JSON inputs, generated artifacts and field files."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from .entropy import FieldSamples, SemimetricSample, space_from_points
from .measures import MeasureFamily, family, rectangular_family, uniform_boxes
from .stopping import PayoffProcess
from .tree import ScenarioTree, TreeError, binary_lattice, from_labels, from_partitions

FIELD_DTYPE = "<f8"


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def load_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def parse_number(v, exact: bool):
    """Numbers or rational strings such as ``"1/3"``."""
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise InputError(f"expected a number, got {v!r}")
    try:
        if exact:
            return Fraction(v) if isinstance(v, (int, str)) else Fraction(repr(float(v)))
        return float(Fraction(v)) if isinstance(v, str) else float(v)
    except (ValueError, ZeroDivisionError):
        raise InputError(f"cannot parse number {v!r}") from None


def parse_vector(vs, exact: bool) -> list:
    if not isinstance(vs, list):
        raise InputError(f"expected a list of numbers, got {type(vs).__name__}")
    return [parse_number(v, exact) for v in vs]


def tree_from_config(cfg: dict, exact: bool = False) -> ScenarioTree:
    """``lattice``, explicit ``partitions`` or per-level ``labels``; weights may be ``"uniform"``."""
    if not isinstance(cfg, dict):
        raise InputError("tree description must be a JSON object")
    times = cfg.get("times")
    if "lattice" in cfg:
        lat = cfg["lattice"]
        return binary_lattice(int(lat["depth"]), parse_number(lat.get("branch_prob", "1/2"), exact), times, exact)
    if "partitions" in cfg:
        n = sum(len(b) for b in cfg["partitions"][-1])
        weights = _weights(cfg.get("p_weights"), n, exact)
        return from_partitions(cfg["partitions"], weights, cfg.get("paths"), times, exact)
    if "labels" in cfg:
        labels = np.asarray(cfg["labels"])
        if labels.ndim != 2:
            raise InputError("labels must be a (levels, paths) matrix")
        weights = _weights(cfg.get("p_weights"), labels.shape[1], exact)
        return from_labels(labels, weights, cfg.get("paths"), times, exact)
    raise InputError("tree description needs one of 'lattice', 'partitions' or 'labels'")


def _weights(w, n: int, exact: bool) -> list:
    if w is None:
        raise InputError("tree description missing 'p_weights'")
    if w == "uniform":
        return [Fraction(1, n) if exact else 1.0 / n] * n
    return parse_vector(w, exact)


def read_tree(path, exact: bool = False) -> ScenarioTree:
    try:
        return tree_from_config(load_json(path), exact)
    except (KeyError, TypeError) as e:
        raise InputError(f"{path}: malformed tree description ({e})") from None


def read_family(path, tree: ScenarioTree | None, exact: bool = False) -> tuple[ScenarioTree, MeasureFamily]:
    """Returns the tree too, since a Girsanov artifact carries its own."""
    path = Path(path)
    cfg = load_json(path)
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: family file must be a JSON object")
    try:
        if "girsanov_ref" in cfg:
            ref = Path(cfg["girsanov_ref"])
            return read_family(ref if ref.is_absolute() else path.parent / ref, None, exact)
        if "tree" in cfg and tree is None:
            tree = tree_from_config(cfg["tree"], exact)
        if tree is None:
            raise InputError(f"{path}: no tree given and the family file does not carry one")
        if "densities" in cfg:
            dens = [parse_vector(d, exact) for d in cfg["densities"]]
            if any(len(d) != tree.n_paths for d in dens):
                raise InputError(f"{path}: every density needs {tree.n_paths} entries")
            return tree, family(tree, dens, cfg.get("labels"))
        if "rectangular" in cfg:
            rect = cfg["rectangular"]
            if "boxes" in rect:
                boxes = [[[parse_vector(iv, exact) for iv in box] for box in level] for level in rect["boxes"]]
            else:
                boxes = uniform_boxes(tree, parse_number(rect["lo"], exact), parse_number(rect["hi"], exact))
            return tree, rectangular_family(tree, boxes)
    except (KeyError, TypeError) as e:
        raise InputError(f"{path}: malformed family description ({e})") from None
    raise InputError(f"{path}: family file needs 'densities', 'rectangular' or 'girsanov_ref'")


def payoff_from_config(cfg: dict, tree: ScenarioTree, exact: bool = False) -> PayoffProcess:
    if "nodes" in cfg:
        return PayoffProcess.from_nodes(tree, [parse_vector(v, exact) for v in cfg["nodes"]])
    if "paths" in cfg:
        return PayoffProcess.from_paths(tree, [parse_vector(v, exact) for v in cfg["paths"]])
    raise InputError("payoff description needs 'nodes' (per-level node values) or 'paths'")


def read_payoff(path, tree: ScenarioTree, exact: bool = False) -> PayoffProcess:
    try:
        return payoff_from_config(load_json(path), tree, exact)
    except (KeyError, TypeError) as e:
        raise InputError(f"{path}: malformed payoff description ({e})") from None


def space_from_config(cfg: dict) -> SemimetricSample:
    if "dist" in cfg:
        dist = np.asarray(cfg["dist"], dtype=float)
        points = tuple(cfg.get("points", range(len(dist))))
        return SemimetricSample(points, dist)
    if "points" in cfg:
        return space_from_points(cfg["points"], cfg.get("metric", "abs"))
    raise InputError("space description needs 'dist' or 'points'")


def space_to_config(s: SemimetricSample) -> dict:
    return {"points": list(s.points), "dist": s.dist.tolist()}


def read_space(path) -> SemimetricSample:
    try:
        return space_from_config(load_json(path))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InputError):
            raise
        raise InputError(f"{path}: malformed space description ({e})") from None


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_field(path, f: FieldSamples, points=None) -> None:
    """Row-major little-endian float64 matrix plus ``<path>.json`` metadata."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(f.values, dtype=FIELD_DTYPE).tobytes())
    meta = {"dims": list(f.values.shape), "dtype": FIELD_DTYPE, "order": "C", "seed": f.seed, "generator": f.generator}
    if points is not None:
        meta["points"] = list(points)
    write_json(sidecar_path(path), meta)


def read_field(path) -> FieldSamples:
    path = Path(path)
    meta = load_json(sidecar_path(path))
    try:
        rows, cols = (int(v) for v in meta["dims"])
    except (KeyError, TypeError, ValueError):
        raise InputError(f"{sidecar_path(path)}: sidecar needs 'dims': [points, samples]") from None
    if meta.get("dtype", FIELD_DTYPE) != FIELD_DTYPE or meta.get("order", "C") != "C":
        raise InputError(f"{path}: only C-ordered {FIELD_DTYPE} fields are supported")
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise InputError(f"{path}: file not found") from None
    if len(raw) != rows * cols * 8:
        raise InputError(f"{path}: expected {rows * cols * 8} bytes for dims {rows}x{cols}, found {len(raw)}")
    values = np.frombuffer(raw, dtype=FIELD_DTYPE).reshape(rows, cols)
    return FieldSamples(values.copy(), seed=meta.get("seed"), generator=meta.get("generator", "unknown"))


def tree_to_config(tree: ScenarioTree) -> dict:
    """Compact description using per-level labels."""
    p = tree.p
    uniform = all(w == p[0] for w in p)
    return {
        "times": list(tree.times),
        "paths": list(tree.paths),
        "labels": tree.node_of.tolist(),
        "p_weights": "uniform" if uniform else [float(w) for w in p],
    }


__all__ = [
    "InputError",
    "TreeError",
    "load_json",
    "write_json",
    "parse_number",
    "tree_from_config",
    "read_tree",
    "read_family",
    "read_payoff",
    "payoff_from_config",
    "read_space",
    "space_from_config",
    "space_to_config",
    "read_field",
    "write_field",
    "tree_to_config",
]
