"""Run configuration: JSON documents, presets and conversion to a ``Problem``.

Config files describe geometry in a unit-height domain: ``y`` runs over
``[0, 1]`` and ``x`` over ``[0, nx/ny]``.  Site positions and support/load
regions are given in those coordinates, and metric factors ``D`` in their
inverse (so ``D = 75`` makes a distance of 1 span 1/75 of the domain height).
``to_problem`` rescales everything to element units.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elasticity import BoundaryConditions, DomainMask, Load, MaterialModel, Support
from .pipeline import Problem, SiteInit
from .projection import ProjectionConfig
from .voronoi_field import FieldConfig


class ConfigError(ValueError):
    """A configuration problem; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


DEFAULTS = {
    "preset": None,
    "grid": {"nx": 128, "ny": 64},
    "volume_fraction": 0.35,
    "sites": {"coarse_grid": [6, 3], "metric": [[75.0, 0.0], [0.0, 75.0]], "seed": 0,
              "region": None, "positions": None},
    "field": {"sharpness": 50.0, "boundary_weight": 0.0, "neighbor_count": 16,
              "distance_floor": 1e-12},
    "projection": {"threshold": 0.5, "doubling_period": 50, "steepness_cap": 64.0},
    "material": {"E0": 1.0, "E_min": 1e-9, "poisson": 0.3, "penal": 1.0},
    "supports": [{"region": [0.0, 0.0, 0.0, 1.0], "axes": [0, 1]}],
    "loads": [{"region": [2.0, 0.5, 2.0, 0.5], "force": [0.0, -1.0]}],
    "frame_thickness": 0.0,
    "mask": None,
    "count_passive_solid": False,
    "optimizer": {"max_iterations": 250, "delta_tol": 1e-4, "compliance_tol": 1e-3,
                  "optimize_positions": True, "optimize_metrics": True,
                  "position_margin": 0.2, "diagonal_bounds": [0.0, 1000.0],
                  "off_diagonal_bounds": [-50.0, 50.0], "move_limit": 0.02,
                  "asymptote_init": 0.1, "objective_scaling": "log"},
    "fem": {"tol": 1e-8, "max_iter": 5000, "preconditioner": "jacobi"},
    "output": {"directory": "out", "emit_every": 10},
}

PRESETS = {
    "cantilever": {},
    "framed_cantilever": {
        "frame_thickness": 0.01,
        "sites": {"coarse_grid": [8, 4]},
        "loads": [{"region": [2.0, 0.4, 2.0, 0.6], "force": [0.0, -1.0]}],
    },
    "free_boundary_cantilever": {
        "field": {"boundary_weight": 1e-7},
        "sites": {"coarse_grid": [8, 4], "region": [0.4, 0.32, 1.6, 0.68],
                  "metric": [[125.0, 0.0], [0.0, 125.0]]},
        "loads": [{"region": [2.0, 0.0, 2.0, 0.0], "force": [0.0, -1.0]}],
        "optimizer": {"max_iterations": 100, "optimize_metrics": False},
    },
    "pushdown_two_sites": {
        "grid": {"nx": 64, "ny": 64},
        "volume_fraction": 0.2,
        "sites": {"positions": [[0.5, 0.5], [0.1, 0.9]],
                  "metric": [[80.0, 0.0], [0.0, 80.0]]},
        "field": {"neighbor_count": 2},
        "supports": [{"region": [0.0, 0.0, 1.0, 0.0], "axes": [0, 1]}],
        "loads": [{"region": [0.45, 1.0, 0.55, 1.0], "force": [0.0, -1.0]}],
        "optimizer": {"max_iterations": 150, "optimize_metrics": False,
                      "diagonal_bounds": [0.0, 2000.0], "off_diagonal_bounds": [-100.0, 100.0]},
    },
    "arch_two_sites": {
        "grid": {"nx": 64, "ny": 64},
        "volume_fraction": 0.15,
        "sites": {"positions": [[0.5, 0.25], [0.5, 0.75]],
                  "metric": [[150.0, 0.0], [0.0, 150.0]]},
        "field": {"neighbor_count": 2},
        "supports": [{"region": [0.0, 0.0, 0.0, 0.0], "axes": [0, 1]},
                     {"region": [1.0, 0.0, 1.0, 0.0], "axes": [0, 1]}],
        "loads": [{"region": [0.5, 0.5, 0.5, 0.5], "force": [0.0, -1.0]}],
        "optimizer": {"max_iterations": 250, "optimize_positions": False,
                      "diagonal_bounds": [0.0, 2000.0], "off_diagonal_bounds": [-100.0, 100.0]},
    },
    "masked": {"mask": "REQUIRED"},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(where, "expected a table")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve(document: dict | None = None, preset: str | None = None) -> dict:
    """Merge defaults, a preset and explicit keys (in that order) into a raw config."""
    document = dict(document or {})
    name = preset or document.get("preset")
    cfg = copy.deepcopy(DEFAULTS)
    if name is not None:
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; choose from "
                              f"{', '.join(sorted(PRESETS))}")
        cfg = _merge(cfg, PRESETS[name])
    cfg = _merge(cfg, document)
    cfg["preset"] = name
    return cfg


def load_config_document(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"malformed JSON in {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return doc


# -- validation helpers ------------------------------------------------------------------

def _num(cfg, key, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    val = cfg
    for part in key.split("."):
        val = val[part]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(key, f"expected a finite number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(key, f"expected an integer, got {val!r}")
    if lo is not None and (val < lo or (lo_open and val == lo)):
        raise ConfigError(key, f"must be {'>' if lo_open else '>='} {lo}, got {val}")
    if hi is not None and (val > hi or (hi_open and val == hi)):
        raise ConfigError(key, f"must be {'<' if hi_open else '<='} {hi}, got {val}")
    return int(val) if integer else float(val)


def _flag(cfg, key):
    val = cfg
    for part in key.split("."):
        val = val[part]
    if not isinstance(val, bool):
        raise ConfigError(key, f"expected true or false, got {val!r}")
    return val


def _vector(val, key, length):
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {length} numbers") from None
    if arr.shape != (length,) or not np.all(np.isfinite(arr)):
        raise ConfigError(key, f"expected {length} finite numbers, got {val!r}")
    return arr


def _choice(cfg, key, options):
    val = cfg
    for part in key.split("."):
        val = val[part]
    if val not in options:
        raise ConfigError(key, f"expected one of {', '.join(map(repr, options))}, got {val!r}")
    return val


def _pair(cfg, key):
    val = cfg
    for part in key.split("."):
        val = val[part]
    lo, hi = _vector(val, key, 2)
    if not lo < hi:
        raise ConfigError(key, "lower bound must be below upper bound")
    return float(lo), float(hi)


@dataclass
class RunConfig:
    problem: Problem
    raw: dict
    output_dir: Path
    emit_every: int
    scale: float            # element units per config unit

    @property
    def preset(self):
        return self.raw.get("preset")


def to_problem(cfg: dict, base_dir: Path | None = None) -> RunConfig:
    nx = _num(cfg, "grid.nx", 1, integer=True)
    ny = _num(cfg, "grid.ny", 1, integer=True)
    s = float(ny)
    target = _num(cfg, "volume_fraction", 0, 1, lo_open=True, hi_open=True)

    field_cfg = FieldConfig(
        sharpness=_num(cfg, "field.sharpness", 1),
        boundary_weight=_num(cfg, "field.boundary_weight", 0),
        neighbor_count=_num(cfg, "field.neighbor_count", 1, integer=True),
        distance_floor=_num(cfg, "field.distance_floor", 0, lo_open=True))
    proj = ProjectionConfig(
        threshold=_num(cfg, "projection.threshold", 0, 1, True, True),
        doubling_period=_num(cfg, "projection.doubling_period", 1, integer=True),
        steepness_cap=_num(cfg, "projection.steepness_cap", 1))
    try:
        mat = MaterialModel(E0=_num(cfg, "material.E0", 0, lo_open=True),
                            E_min=_num(cfg, "material.E_min", 0, lo_open=True),
                            poisson=_num(cfg, "material.poisson", 0, 0.5, True, True),
                            penal=_num(cfg, "material.penal", 1))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("material", str(exc)) from None

    sc = cfg["sites"]
    metric = np.asarray(sc["metric"], dtype=float) if sc["metric"] is not None else None
    if metric is None or metric.shape != (2, 2) or not np.all(np.isfinite(metric)):
        raise ConfigError("sites.metric", "expected a 2x2 matrix")
    if metric[0, 1] != metric[1, 0]:
        raise ConfigError("sites.metric", "matrix must be symmetric")
    seed = _num(cfg, "sites.seed", 0, integer=True)
    coarse = sc["coarse_grid"]
    if (not isinstance(coarse, (list, tuple)) or len(coarse) != 2
            or not all(isinstance(c, int) and not isinstance(c, bool) and c >= 1
                       for c in coarse)):
        raise ConfigError("sites.coarse_grid", f"expected two positive integers, got {coarse!r}")
    region = None
    if sc["region"] is not None:
        region = _vector(sc["region"], "sites.region", 4)
        if not (region[2] > region[0] and region[3] > region[1]):
            raise ConfigError("sites.region", "expected [x0, y0, x1, y1] with x1 > x0, y1 > y0")
        region = tuple(float(v) * s for v in region)
    positions = None
    if sc["positions"] is not None:
        pos = np.asarray(sc["positions"], dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) < 1 or not np.all(np.isfinite(pos)):
            raise ConfigError("sites.positions", "expected a nonempty list of [x, y] points")
        positions = tuple(tuple(float(v) * s for v in p) for p in pos)
    site_init = SiteInit(tuple(coarse), tuple(map(tuple, metric / s)), seed, region, positions)
    if field_cfg.neighbor_count > site_init.n_sites:
        raise ConfigError("field.neighbor_count",
                          f"{field_cfg.neighbor_count} exceeds the {site_init.n_sites} sites")
    if positions is None and (coarse[0] > nx or coarse[1] > ny):
        raise ConfigError("sites.coarse_grid",
                          f"{coarse} has more cells than the {nx}x{ny} grid")

    supports = []
    if not isinstance(cfg["supports"], list) or not cfg["supports"]:
        raise ConfigError("supports", "need at least one support")
    for n, sup in enumerate(cfg["supports"]):
        key = f"supports[{n}]"
        if not isinstance(sup, dict) or set(sup) - {"region", "axes"} or "region" not in sup:
            raise ConfigError(key, "expected {region: [x0,y0,x1,y1], axes: [..]}")
        reg = _vector(sup["region"], key + ".region", 4) * s
        axes = sup.get("axes", [0, 1])
        if not axes or any(a not in (0, 1) for a in axes):
            raise ConfigError(key + ".axes", f"axes must be a subset of [0, 1], got {axes!r}")
        supports.append(Support(tuple(reg), tuple(sorted(set(axes)))))
    loads = []
    if not isinstance(cfg["loads"], list) or not cfg["loads"]:
        raise ConfigError("loads", "need at least one load")
    for n, ld in enumerate(cfg["loads"]):
        key = f"loads[{n}]"
        if not isinstance(ld, dict) or set(ld) - {"region", "force"} or "region" not in ld:
            raise ConfigError(key, "expected {region: [x0,y0,x1,y1], force: [fx, fy]}")
        reg = _vector(ld["region"], key + ".region", 4) * s
        force = _vector(ld.get("force"), key + ".force", 2)
        loads.append(Load(tuple(reg), tuple(force)))
    bcs = BoundaryConditions(tuple(supports), tuple(loads))
    try:
        bcs.force_vector(nx, ny)
    except ValueError as exc:
        raise ConfigError("loads", str(exc)) from None

    mask = None
    if cfg["mask"] is not None:
        if cfg["mask"] == "REQUIRED":
            raise ConfigError("mask", "this preset needs a mask image path")
        from .io import load_mask
        mpath = Path(cfg["mask"])
        if not mpath.is_absolute() and base_dir is not None:
            mpath = base_dir / mpath
        try:
            mask = load_mask(mpath, nx, ny)
        except (OSError, ValueError) as exc:
            raise ConfigError("mask", str(exc)) from None
    frame = _num(cfg, "frame_thickness", 0, 0.5, hi_open=True)
    if frame > 0:
        mask = add_frame(mask, nx, ny, frame * s)

    opt = "optimizer."
    fem_iter = cfg["fem"]["max_iter"]
    if fem_iter is not None:
        fem_iter = _num(cfg, "fem.max_iter", 1, integer=True)
    precond = cfg["fem"]["preconditioner"]
    if precond not in ("jacobi", "amg"):
        raise ConfigError("fem.preconditioner", f"expected 'jacobi' or 'amg', got {precond!r}")
    diag = _pair(cfg, opt + "diagonal_bounds")
    off = _pair(cfg, opt + "off_diagonal_bounds")
    try:
        problem = Problem(
            nx=nx, ny=ny, bcs=bcs, target_volume=target, sites=site_init, mask=mask,
            material=mat, field_config=field_cfg, projection=proj,
            max_iterations=_num(cfg, opt + "max_iterations", 0, integer=True),
            delta_tol=_num(cfg, opt + "delta_tol", 0),
            compliance_tol=_num(cfg, opt + "compliance_tol", 0),
            optimize_positions=_flag(cfg, opt + "optimize_positions"),
            optimize_metrics=_flag(cfg, opt + "optimize_metrics"),
            position_margin=_num(cfg, opt + "position_margin", 0),
            diagonal_bounds=(diag[0] / s, diag[1] / s),
            off_diagonal_bounds=(off[0] / s, off[1] / s),
            count_passive_solid=_flag(cfg, "count_passive_solid"),
            fem_tol=_num(cfg, "fem.tol", 0, lo_open=True),
            fem_max_iter=fem_iter, preconditioner=precond,
            move_limit=_num(cfg, opt + "move_limit", 0, 1, lo_open=True),
            asymptote_init=_num(cfg, opt + "asymptote_init", 0, lo_open=True),
            objective_scaling=_choice(cfg, opt + "objective_scaling", ("first", "log")))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        key = "optimizer" if "optimize" in str(exc) else "config"
        raise ConfigError(key, str(exc)) from None

    out = cfg["output"]
    emit = _num(cfg, "output.emit_every", 1, integer=True)
    if not isinstance(out["directory"], str):
        raise ConfigError("output.directory", "expected a path string")
    return RunConfig(problem, cfg, Path(out["directory"]), emit, s)


def add_frame(mask: DomainMask | None, nx: int, ny: int, thickness: float) -> DomainMask:
    """Mark elements whose centroid lies within ``thickness`` of the border as solid."""
    states = np.zeros((ny, nx), np.int8) if mask is None else mask.states.copy()
    jj, ii = np.mgrid[0:ny, 0:nx]
    cx, cy = ii + 0.5, jj + 0.5
    edge = np.minimum.reduce([cx, nx - cx, cy, ny - cy])
    states[edge <= thickness] = DomainMask.SOLID
    try:
        return DomainMask(states)
    except ValueError as exc:
        raise ConfigError("frame_thickness", str(exc)) from None


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Read, merge and validate a config; either ``path`` or ``preset`` may be omitted."""
    doc = load_config_document(path) if path is not None else {}
    base_dir = Path(path).resolve().parent if path is not None else None
    cfg = resolve(doc, preset)
    if overrides:
        cfg = _merge(cfg, overrides)
    return to_problem(cfg, base_dir)
