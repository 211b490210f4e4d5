"""Experiment configuration, pipelines and report bundles.

A run turns a validated :class:`ExperimentConfig` into a report bundle::

    <out>/report.json      verdicts, metadata, run log
    <out>/config.json      the config with every default filled in
    <out>/tables/*.csv     residual tables

Bundles contain no timestamps or timings, so identical configs give identical bytes.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import itertools
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__

SCHEMA_VERSION = 1
PIPELINES = ("flat-check", "deform", "twistor-transport", "involutivity", "cech", "disks",
             "roundtrip", "holonomy")


class ConfigError(ValueError):
    """Schema violation; ``field`` names the offending key (dotted for nested keys)."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class PipelineMismatchError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------

_DEFAULT_P = {"flat-check": 2, "deform": 3, "twistor-transport": 2, "involutivity": 3, "cech": 2,
              "disks": 2, "roundtrip": 3, "holonomy": 2}
_DEFAULT_T = {"deform": 1e-2, "involutivity": 1e-2, "disks": 1e-2, "roundtrip": 1e-2, "holonomy": 1e-2}
_DEFAULT_SAMPLES = {"flat-check": 0, "deform": 0, "twistor-transport": 5, "involutivity": 100, "cech": 0,
                    "disks": 50, "roundtrip": 3, "holonomy": 2}

_TOLERANCES = {
    "flat-check": {"torsion": 1e-8, "right_flat": 1e-8, "holonomy": 1e-6, "rk4_order": 3.5},
    "deform": {"slope_low": 1.8, "slope_high": 2.2, "first_order_rel": 0.05},
    "twistor-transport": {"ward": 1e-6, "omega_norm": 1e-8, "eta_pi": 1e-6},
    "involutivity": {"flat": 1e-6, "planted": 1e-4, "scale": 1e-6},
    "cech": {"cubic": 1e-10, "quartic": 1e-9},
    "disks": {"newton_steps": 6, "boundary": 1e-9, "k_doubling": 1e-8, "fixed_point": 1e-13},
    "roundtrip": {"angle": 1e-6, "right_flat_flat": 1e-6, "right_flat": 1e-5, "torsion": 1e-5},
    "holonomy": {"contraction": 1e-12, "closed_form": 1e-10, "twistor": 1e-4, "zrm": 1e-4,
                 "holonomy": 1e-4, "reality_gate": 1e-6, "negative_control": 1e-3},
}


def _default_field(p: int) -> dict:
    return {"type": "rotation_curl", "n": p + 2, "plane": [0, 1], "monomial": [2, 3], "scale": 1.0}


def _defaults(pipeline: str, p: int) -> dict:
    return {
        "pipeline": pipeline,
        "p": p,
        "q": 2,
        "m": p // 2 if pipeline == "holonomy" else None,
        "seed": 0,
        "grid": {"per_axis": 5, "cap": 2000},
        "tolerances": dict(_TOLERANCES[pipeline]),
        "deformation": {"t": _DEFAULT_T.get(pipeline, 0.0),
                        "field": _default_field(p) if pipeline in ("disks", "roundtrip", "holonomy") else None},
        "K": 16,
        "step": 0.002,
        "samples": _DEFAULT_SAMPLES[pipeline],
        "loops": {"side": 0.2 if pipeline == "flat-check" else 0.1, "squares": 3,
                  "n_random": 20 if pipeline == "holonomy" else 0,
                  "steps": 40 if pipeline == "flat-check" else 2},
    }


def _check_int(name, v, lo=None, hi=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(name, f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(name, f"must be <= {hi}, got {v}")


def _check_number(name, v, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(name, f"expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(name, f"must be positive, got {v}")


def _merge(base: dict, extra: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        name = prefix + k
        if k not in base:
            raise ConfigError(name, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(name, f"expected an object, got {v!r}")
            if k == "deformation" and "field" in v:
                rest = {kk: vv for kk, vv in v.items() if kk != "field"}
                out[k] = _merge(base[k], rest, name + ".")
                out[k]["field"] = copy.deepcopy(v["field"])
            else:
                out[k] = _merge(base[k], v, name + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.  Build it with :meth:`from_dict`."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        pipeline = raw.get("pipeline")
        if pipeline not in PIPELINES:
            raise ConfigError("pipeline", f"must be one of {', '.join(PIPELINES)}; got {pipeline!r}")
        p = raw.get("p", _DEFAULT_P[pipeline])
        _check_int("p", p, 2, 6)
        data = _merge(_defaults(pipeline, p), raw)
        cls._validate(data)
        return cls(data)

    @staticmethod
    def _validate(d: dict) -> None:
        pl, p = d["pipeline"], d["p"]
        _check_int("q", d["q"])
        if d["q"] != 2:
            raise ConfigError("q", f"the {pl} pipeline requires q = 2, got {d['q']}")
        if pl == "flat-check" and p > 4:
            raise ConfigError("p", "flat-check supports p = 2, 3, 4")
        if pl == "holonomy":
            if p % 2:
                raise ConfigError("p", "holonomy needs p = 2m even")
            _check_int("m", d["m"], 1)
            if 2 * d["m"] != p:
                raise ConfigError("m", f"holonomy needs p = 2m; got p = {p}, m = {d['m']}")
        elif d["m"] is not None:
            raise ConfigError("m", f"not used by the {pl} pipeline; leave it null")
        _check_int("seed", d["seed"], 0, 2 ** 64 - 1)
        _check_int("grid.per_axis", d["grid"]["per_axis"], 2)
        _check_int("grid.cap", d["grid"]["cap"], 1)
        _check_int("K", d["K"], 4, 256)
        _check_number("step", d["step"], positive=True)
        _check_int("samples", d["samples"], 0)
        if pl in ("twistor-transport", "involutivity", "disks", "roundtrip", "holonomy") and d["samples"] < 1:
            raise ConfigError("samples", f"the {pl} pipeline needs samples >= 1")
        for k, v in d["tolerances"].items():
            _check_number(f"tolerances.{k}", v)
        _check_number("deformation.t", d["deformation"]["t"])
        if pl == "deform" and d["deformation"]["t"] <= 0:
            raise ConfigError("deformation.t", "deform needs t > 0")
        fd = d["deformation"]["field"]
        if fd is not None:
            from .disk_moduli import field_from_descriptor
            try:
                v = field_from_descriptor(fd)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError("deformation.field", f"bad vector field descriptor ({exc})") from None
            if getattr(v, "n", p + 2) != p + 2:
                raise ConfigError("deformation.field", f"field lives on R^{v.n}, need R^{p + 2}")
        _check_number("loops.side", d["loops"]["side"], positive=True)
        for k in ("squares", "n_random"):
            _check_int(f"loops.{k}", d["loops"][k], 0)
        _check_int("loops.steps", d["loops"]["steps"], 1)

    def __getitem__(self, key):
        return self.data[key]

    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(self.data)
        old_p = raw["p"]
        for key, value in overrides.items():
            parts = key.split(".")
            node = raw
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(key, "unknown key")
                node = node[part]
            node[parts[-1]] = value
        if "p" in overrides and raw["p"] != old_p:
            # defaults that depend on p follow it unless set explicitly
            if "m" not in overrides and raw["pipeline"] == "holonomy":
                raw["m"] = raw["p"] // 2
            if "deformation.field" not in overrides and raw["deformation"]["field"] == _default_field(old_p):
                raw["deformation"]["field"] = _default_field(raw["p"])
        return ExperimentConfig.from_dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


# -- run bookkeeping ------------------------------------------------------------------------

def _num(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return v if np.isfinite(v) else repr(v)


class _Run:
    """Collects verdicts, tables and the log of operations that produced them."""

    def __init__(self):
        self.verdicts: list[dict] = []
        self.tables: dict[str, list[dict]] = {}
        self.log: list[dict] = []
        self.notes: list[str] = []

    def op(self, name: str, fn: Callable, *args, **params):
        self.log.append({"op": name, "params": {k: _jsonable(v) for k, v in sorted(params.items())}})
        return fn(*args)

    def check(self, name: str, value, op: str, threshold, source: str):
        value = _num(value)
        v = float(value) if not isinstance(value, str) else float("nan")
        ok = {"<": v < threshold, ">": v > threshold, "<=": v <= threshold, ">=": v >= threshold,
              "==": v == threshold}[op]
        self.verdicts.append({"name": name, "value": value, "op": op, "threshold": _num(threshold),
                              "pass": bool(ok), "source": source})

    def row(self, table: str, **cols):
        self.tables.setdefault(table, []).append({k: _num(v) if not isinstance(v, str) else v
                                                  for k, v in cols.items()})


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, (np.generic, int, float, bool)):
        return _num(v)
    return v


# -- pipelines ---------------------------------------------------------------------------

def _wiggly(n):
    from .ag_chart import ChartField
    return ChartField(lambda x: np.exp(x[0] + x[1] * x[2]) / (1 + 0.3 * x[3] ** 2), n)


def _planted_ft(p: int, seed: int) -> np.ndarray:
    """Constant F~-type tensor K_ab^c, antisymmetric in (a, b), flattened to (n, n, n)."""
    K = np.random.default_rng(seed).normal(size=(p, 2, p, 2, p, 2))
    K = K - K.transpose(2, 3, 0, 1, 4, 5)
    f = 0.5 * (K + K.transpose(2, 1, 0, 3, 4, 5))
    return (K - f).reshape(2 * p, 2 * p, 2 * p)


def _linear_phi(K):
    from .ag_chart import ChartField
    return ChartField(lambda x: np.einsum("a,abc->bc", x, K), K.shape[0])


def _pipe_flat_check(cfg, run: _Run):
    from .ag_chart import chart_grid, flat_model, right_flat_residual, torsion_array
    from .correspondence import oneill_residual, random_fiber_points
    from .local_twistor import holonomy_defect, refinement_order, schouten, square_loop

    p, tol = cfg["p"], cfg["tolerances"]
    ag = flat_model(p)
    n = ag.dim
    grid = run.op("ag_chart.chart_grid", chart_grid, ag, cfg["grid"]["per_axis"], cfg["grid"]["cap"],
                  per_axis=cfg["grid"]["per_axis"], cap=cfg["grid"]["cap"])
    worst = 0.0
    for i, x in enumerate(grid):
        v = float(np.max(np.abs(torsion_array(ag, x))))
        worst = max(worst, v)
        run.row("torsion", point=i, sup_norm=v)
    run.log.append({"op": "ag_chart.torsion_array", "params": {"points": len(grid)}})
    run.check("torsion_sup", worst, "<", tol["torsion"], "ag_chart.torsion_array")
    if p > 2:
        rf = run.op("ag_chart.right_flat_residual", right_flat_residual, ag, grid, points=len(grid))
        run.check("right_flat", rf, "<", tol["right_flat"], "ag_chart.right_flat_residual")
    else:
        # p = 2: right-flatness measured as involutivity of the complex alpha-plane distribution
        fps = random_fiber_points(ag, 10, seed=cfg["seed"])
        rf = max(oneill_residual(ag, fp) for fp in fps)
        run.log.append({"op": "correspondence.oneill_residual", "params": {"points": 10, "seed": cfg["seed"]}})
        run.check("right_flat", rf, "<", tol["right_flat"], "correspondence.oneill_residual")
    pf = schouten(ag)
    side, steps = cfg["loops"]["side"], cfg["loops"]["steps"]
    worst = 0.0
    for i, j in [(0, 1), (0, n - 1), (1, 2)]:
        d = holonomy_defect(ag, pf, square_loop(np.zeros(n), i, j, side, steps))
        worst = max(worst, d)
        run.row("holonomy", plane=f"{i}-{j}", side=side, steps=steps, defect=d)
    run.log.append({"op": "local_twistor.holonomy_defect", "params": {"side": side, "steps": steps}})
    run.check("holonomy_defect", worst, "<", tol["holonomy"], "local_twistor.holonomy_defect")
    agw = ag.rescaled(_wiggly(n))
    defects, order = run.op("local_twistor.refinement_order", refinement_order, agw, schouten(agw),
                            square_loop(np.zeros(n), 0, 3, side, steps), (2, 4, 8),
                            scale="exp(x0 + x1 x2)/(1 + 0.3 x3^2)", steps=[2, 4, 8])
    for s, d in zip((2, 4, 8), defects):
        run.row("refinement", steps=s, defect=d)
    run.check("rk4_order", order, ">=", tol["rk4_order"], "local_twistor.refinement_order")


def _pipe_deform(cfg, run: _Run):
    from .ag_chart import deform, flat_model, torsion_array, trace_free_pieces

    p, tol = cfg["p"], cfg["tolerances"]
    t0 = cfg["deformation"]["t"]
    K = _planted_ft(p, cfg["seed"] + 1)
    _, kt = trace_free_pieces(K, p, 2)
    x = np.full(2 * p, 0.05)
    ts = [t0, t0 / 2, t0 / 4]
    rems = []
    for t in ts:
        d = deform(flat_model(p), _linear_phi(K), t)
        _, ft = run.op("ag_chart.torsion_array", lambda: trace_free_pieces(torsion_array(d, x), p, 2), t=t)
        rem = float(np.max(np.abs(ft + 2 * t * kt)))
        rems.append(rem)
        run.row("remainder", t=t, first_order=float(np.max(np.abs(2 * t * kt))), remainder=rem,
                relative=rem / float(np.max(np.abs(ft))))
    slope = float(np.polyfit(np.log(ts), np.log(rems), 1)[0])
    run.check("remainder_slope_min", slope, ">=", tol["slope_low"], "numpy.polyfit")
    run.check("remainder_slope_max", slope, "<=", tol["slope_high"], "numpy.polyfit")
    run.check("first_order_relative", run.tables["remainder"][-1]["relative"], "<", tol["first_order_rel"],
              "ag_chart.torsion_array")


def _rotating_family(w, rho, drho, pi, dpi, p):
    from .local_twistor import AlphaFamily
    return AlphaFamily(lambda s, mu: s * w + np.kron(mu, rho + s * drho), lambda s: pi + s * dpi, p)


def _pipe_twistor_transport(cfg, run: _Run):
    from .ag_chart import flat_model
    from .local_twistor import AlphaFamily, schouten, ward_pair_check

    p, tol = cfg["p"], cfg["tolerances"]
    ag = flat_model(p)
    pf = schouten(ag)
    rng = np.random.default_rng(cfg["seed"])
    e0, e1 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    fams = {
        "fixed": _rotating_family(rng.uniform(-0.1, 0.1, 2 * p), e0, np.zeros(2), e1, np.zeros(2), p),
        "rotating": _rotating_family(rng.uniform(-0.1, 0.1, 2 * p), e0, e1, e1, -e0, p),
    }
    worst = 0.0
    for name, fam in fams.items():
        mus = rng.uniform(-0.2, 0.2, (cfg["samples"], p))
        rep = run.op("local_twistor.ward_pair_check", ward_pair_check, ag, pf, fam, mus, family=name,
                     samples=cfg["samples"])
        worst = max(worst, rep.residual)
        run.row("ward", family=name, residual=rep.residual, omega_norm=rep.omega_norm,
                eta_pi=rep.eta_pi_residual)
    run.check("ward_residual", worst, "<", tol["ward"], "local_twistor.ward_pair_check")
    nu = rng.uniform(-0.3, 0.3, p)
    fam = AlphaFamily(lambda s, mu: np.kron(mu + s * nu, e0), lambda s: (1 + s) * e1, p)
    rep = run.op("local_twistor.ward_pair_check", ward_pair_check, ag, pf, fam,
                 rng.uniform(-0.2, 0.2, (cfg["samples"], p)), family="tangential-J")
    run.row("ward", family="tangential-J", residual=rep.residual, omega_norm=rep.omega_norm,
            eta_pi=rep.eta_pi_residual)
    run.check("tangential_omega_norm", rep.omega_norm, "<", tol["omega_norm"], "local_twistor.ward_pair_check")
    run.check("tangential_eta_pi", rep.eta_pi_residual, "<", tol["eta_pi"], "local_twistor.ward_pair_check")


def _pipe_involutivity(cfg, run: _Run):
    from .ag_chart import ChartField, deform, flat_model
    from .correspondence import FiberPoint, oneill_residual, random_fiber_points, scale_independence_residual

    p, tol, seed = cfg["p"], cfg["tolerances"], cfg["seed"]
    flat = flat_model(p)
    fps = random_fiber_points(flat, cfg["samples"], seed=seed)
    worst = 0.0
    for i, fp in enumerate(fps):
        r = oneill_residual(flat, fp)
        worst = max(worst, r)
        run.row("flat_oneill", point=i, zeta_re=fp.zeta.real, zeta_im=fp.zeta.imag, residual=r)
    run.log.append({"op": "correspondence.oneill_residual", "params": {"points": len(fps), "seed": seed}})
    run.check("flat_oneill_max", worst, "<", tol["flat"], "correspondence.oneill_residual")
    t = cfg["deformation"]["t"]
    planted = deform(flat, _linear_phi(_planted_ft(p, seed + 1)), t)
    best = 0.0
    for zeta in (0.3 + 0.7j, -0.5 + 0.2j, 1.1 - 0.9j):
        r = oneill_residual(planted, FiberPoint(np.full(2 * p, 0.1), zeta))
        best = max(best, r)
        run.row("planted_oneill", zeta_re=zeta.real, zeta_im=zeta.imag, residual=r)
    run.log.append({"op": "correspondence.oneill_residual", "params": {"structure": "planted F~", "t": t}})
    run.check("planted_oneill_max", best, ">", tol["planted"], "correspondence.oneill_residual")
    f = ChartField(lambda x: np.exp(x[0]), 2 * p)
    fibers = random_fiber_points(planted, 5, seed=seed + 2)
    s1 = run.op("correspondence.scale_independence_residual", scale_independence_residual, flat, f, fps[:20],
                structure="flat", scale="exp(x0)", points=20)
    s2 = run.op("correspondence.scale_independence_residual", scale_independence_residual, planted, f, fibers,
                structure="planted F~", scale="exp(x0)", points=5)
    run.row("scale_independence", structure="flat", residual=s1)
    run.row("scale_independence", structure="planted", residual=s2)
    run.check("scale_independence", max(s1, s2), "<", tol["scale"], "correspondence.scale_independence_residual")


def _sym_cubic(p: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(p,) * 4) + 1j * rng.normal(size=(p,) * 4)
    return sum(np.transpose(F, perm + (3,)) for perm in itertools.permutations(range(3))) / 6


def _pipe_cech(cfg, run: _Run):
    from .cech_obstruction import contour_extract, cubic_representative, h1_dimension

    p, tol = cfg["p"], cfg["tolerances"]
    for m in (-2, -1, 0, 1, 2):
        h = run.op("cech_obstruction.h1_dimension", h1_dimension, m, m=m)
        run.row("h1", m=m, h1=h)
        run.check(f"h1_O({m})", h, "==", 1 if m == -2 else 0, "cech_obstruction.h1_dimension")
    F = _sym_cubic(p, cfg["seed"])
    xi = 0.7 - 0.2j
    got = run.op("cech_obstruction.contour_extract", lambda: contour_extract(cubic_representative(F), xi).values,
                 xi=xi, seed=cfg["seed"])
    err = float(np.max(np.abs(got - xi * F)))
    run.check("planted_cubic", err, "<", tol["cubic"], "cech_obstruction.contour_extract")
    rng = np.random.default_rng(cfg["seed"] + 1)
    quartic = {(a, 4 - a): rng.normal(size=p) for a in range(5)}
    base = contour_extract(cubic_representative(F)).values
    got = run.op("cech_obstruction.contour_extract",
                 lambda: contour_extract(cubic_representative(F, quartic)).values, contamination="quartic")
    qerr = float(np.max(np.abs(got - base)))
    run.check("quartic_rejected", qerr, "<", tol["quartic"], "cech_obstruction.contour_extract")
    run.row("extraction", case="planted", error=err)
    run.row("extraction", case="quartic", error=qerr)


def _embedding(cfg):
    from .disk_moduli import RealSliceEmbedding, field_from_descriptor
    fd = cfg["deformation"]["field"]
    return RealSliceEmbedding(cfg["p"], None if fd is None else field_from_descriptor(fd), cfg["deformation"]["t"])


def _newton_quadratic(h) -> bool:
    return all(b < max(10 * a ** 2, 1e-13) for a, b in zip(h, h[1:]))


def _pipe_disks(cfg, run: _Run):
    from .disk_moduli import (ModuliChart, RealSliceEmbedding, boundary_residual, chern_on_fiber, continue_disk,
                              maslov_index, quadric_intersections, solve_disk, standard_disk)

    p, tol, K = cfg["p"], cfg["tolerances"], cfg["K"]
    P = _embedding(cfg)
    chart = ModuliChart(p)
    xs = np.random.default_rng(cfg["seed"]).uniform(-0.25, 0.25, size=(cfg["samples"], 2 * p))
    fixed = solve_disk(RealSliceEmbedding(p), standard_disk(chart.z(xs[0]), K))
    run.log.append({"op": "disk_moduli.solve_disk", "params": {"t": 0.0, "point": 0}})
    run.check("t0_fixed_point_iterations", len(fixed.residual_history) - 1, "==", 0, "disk_moduli.solve_disk")
    run.check("t0_fixed_point_residual", fixed.residual_history[0], "<", tol["fixed_point"],
              "disk_moduli.solve_disk")
    m0 = maslov_index(RealSliceEmbedding(p), standard_disk(chart.z(xs[0]), K))
    chern = chern_on_fiber(m0)
    run.log.append({"op": "disk_moduli.maslov_index", "params": {"t": 0.0, "point": 0}})
    run.check("maslov_standard", m0.normal, "==", p, "disk_moduli.maslov_index")
    run.check("c1_D", chern["c1_D"], "==", -p - 2, "disk_moduli.chern_on_fiber")
    run.check("c1_quotient", chern["c1_quotient"], "==", -p, "disk_moduli.chern_on_fiber")
    steps = max(1, int(np.ceil(P.t / cfg["step"] - 1e-12)))
    worst_iter, quad, worst_bdry, kappas, qcount = 0, True, 0.0, set(), set()
    for i, x in enumerate(xs):
        disk = standard_disk(chart.z(x), K)
        iters = []
        for k in range(1, steps + 1):
            disk = solve_disk(P.at(P.t * k / steps), disk)
            iters.append(len(disk.residual_history) - 1)
            quad &= _newton_quadratic(disk.residual_history)
        b = boundary_residual(P, disk)
        mas = maslov_index(P, disk).normal
        nq = quadric_intersections(disk)
        worst_iter = max(worst_iter, max(iters))
        worst_bdry = max(worst_bdry, b)
        kappas.add(mas)
        qcount.add(nq)
        run.row("disks", point=i, newton_max=max(iters), final_residual=disk.residual_history[-1],
                boundary=b, maslov=mas, quadric_hits=nq)
    run.log.append({"op": "disk_moduli.solve_disk", "params": {"points": len(xs), "continuation_steps": steps}})
    run.log.append({"op": "disk_moduli.boundary_residual", "params": {"points": len(xs)}})
    run.log.append({"op": "disk_moduli.maslov_index", "params": {"points": len(xs)}})
    run.log.append({"op": "disk_moduli.quadric_intersections", "params": {"points": len(xs)}})
    run.check("newton_steps_max", worst_iter, "<=", tol["newton_steps"], "disk_moduli.solve_disk")
    run.check("newton_quadratic_tails", int(quad), "==", 1, "disk_moduli.solve_disk")
    run.check("boundary_residual_max", worst_bdry, "<", tol["boundary"], "disk_moduli.boundary_residual")
    run.check("maslov_deformed_min", min(kappas), "==", p, "disk_moduli.maslov_index")
    run.check("maslov_deformed_max", max(kappas), "==", p, "disk_moduli.maslov_index")
    run.check("quadric_hits_min", min(qcount), "==", 1, "disk_moduli.quadric_intersections")
    run.check("quadric_hits_max", max(qcount), "==", 1, "disk_moduli.quadric_intersections")
    gate = 0.0
    for i, x in enumerate(xs[:3]):
        r1 = boundary_residual(P, continue_disk(P, chart.z(x), cfg["step"], K))
        r2 = boundary_residual(P, continue_disk(P, chart.z(x), cfg["step"], 2 * K))
        gate = max(gate, abs(r1 - r2))
        run.row("k_doubling", point=i, K=K, residual_K=r1, residual_2K=r2)
    run.log.append({"op": "disk_moduli.continue_disk", "params": {"K": [K, 2 * K], "points": min(3, len(xs))}})
    run.check("k_doubling_delta", gate, "<", tol["k_doubling"], "disk_moduli.boundary_residual")


def _pipe_roundtrip(cfg, run: _Run):
    from scipy.linalg import subspace_angles

    from .ag_chart import right_flat_residual, torsion_array
    from .disk_moduli import (DiskFamily, RealSliceEmbedding, fibre_plane, grassmannian_alpha_plane,
                              recover_ag)
    from .correspondence import oneill_residual, FiberPoint

    p, tol, K = cfg["p"], cfg["tolerances"], cfg["K"]
    xs = np.random.default_rng(cfg["seed"]).uniform(-0.1, 0.1, size=(cfg["samples"], 2 * p))

    def right_flat(ag, x):
        if p > 2:
            return right_flat_residual(ag, x[None, :])
        return oneill_residual(ag, FiberPoint(x, 0.3 + 0.7j))

    for label, P in (("t0", RealSliceEmbedding(p)), ("t", _embedding(cfg))):
        fam = DiskFamily(P, K, cfg["step"])
        ag, rec = run.op("disk_moduli.recover_ag", recover_ag, P, 0.3, K, 1e-3, fam, t=P.t, K=K)
        rf = tor = angle = 0.0
        for i, x in enumerate(xs):
            r = right_flat(ag, x)
            tr = float(np.max(np.abs(torsion_array(ag, x))))
            a = float("nan")
            if label == "t0":
                d = fam.solve(x)
                a = max(float(np.max(subspace_angles(fibre_plane(d, complex(w)),
                                                     grassmannian_alpha_plane(fam.chart, x, complex(w)))))
                        for w in (0.0, 0.4 + 0.3j, 1.0, -1.0, 1j))
                angle = max(angle, a)
            rf, tor = max(rf, r), max(tor, tr)
            run.row("roundtrip", case=label, t=P.t, point=i, right_flat=r, torsion=tr, plane_angle=a)
        run.log.append({"op": "ag_chart.right_flat_residual", "params": {"t": P.t, "points": len(xs)}})
        if label == "t0":
            run.check("alpha_plane_angle_t0", angle, "<", tol["angle"], "scipy.linalg.subspace_angles")
            run.check("right_flat_t0", rf, "<", tol["right_flat_flat"], "ag_chart.right_flat_residual")
        else:
            run.check("right_flat_t", rf, "<", tol["right_flat"], "ag_chart.right_flat_residual")
            if p > 2:
                run.check("torsion_t", tor, "<", tol["torsion"], "ag_chart.torsion_array")
        run.row("factorization", case=label, imag_defect=rec.imag_defect)


def _symmetric_traceless(n, seed):
    A = np.random.default_rng(seed).normal(size=(n, n))
    A = A + A.T
    return A - np.trace(A) / n * np.eye(n)


def _pipe_holonomy(cfg, run: _Run):
    from .disk_moduli import RealSliceEmbedding, TangentialLinearField, field_from_descriptor
    from .holonomy_lab import (CompatibleJ, HolonomyLab, contraction_identity_residual, divfree_flow,
                               loop_family, parallel_holonomy_test, reality_residual, twistor_equation_residual,
                               zrm_residual)

    p, m, tol, seed = cfg["p"], cfg["m"], cfg["tolerances"], cfg["seed"]
    rng = np.random.default_rng(seed)
    zetas = rng.normal(size=8) + 1j * rng.normal(size=8)
    c = run.op("holonomy_lab.contraction_identity_residual", contraction_identity_residual, CompatibleJ(), zetas,
               m, m=m, zetas=8)
    run.check("contraction_identity", c, "<", tol["contraction"], "holonomy_lab.contraction_identity_residual")
    xs = rng.uniform(-0.15, 0.15, size=(cfg["samples"], 2 * p))
    lab0 = run.op("holonomy_lab.HolonomyLab", HolonomyLab, RealSliceEmbedding(p), 0.3, cfg["K"], t=0.0)
    closed = 0.0
    for i, x in enumerate(xs):
        o = lab0.fields.at(x)
        e = max(float(np.max(np.abs(o.raw - o.f * np.eye(2)))) / o.f, float(np.max(np.abs(o.root - np.eye(2)))))
        closed = max(closed, e)
        run.row("residue", t=0.0, point=i, f=o.f, imag_ratio=o.imag_ratio, closed_form_error=e)
    run.log.append({"op": "holonomy_lab.omega_residue", "params": {"t": 0.0, "points": len(xs)}})
    run.check("closed_form_t0", closed, "<", tol["closed_form"], "holonomy_lab.omega_residue")

    samples = rng.normal(size=(40, p + 2))
    t = cfg["deformation"]["t"]
    fd = cfg["deformation"]["field"]
    P = run.op("holonomy_lab.divfree_flow", divfree_flow, None if fd is None else field_from_descriptor(fd), t, p,
               t=t, field=fd)
    reality = run.op("holonomy_lab.reality_residual", reality_residual, P, samples, samples=40)
    neg = RealSliceEmbedding(p, TangentialLinearField(_symmetric_traceless(p + 2, seed)), t)
    neg_reality = run.op("holonomy_lab.reality_residual", reality_residual, neg, samples,
                         control="tangential symmetric traceless")
    neg_res = parallel_holonomy_test(lab0.ag, lab0.fields.root, [], reality=neg_reality, gate=tol["reality_gate"])
    run.row("reality", case="divergence-free", residual=reality)
    run.row("reality", case="negative-control", residual=neg_reality, verdict=neg_res.verdict)
    run.check("reality_gate", reality, "<", tol["reality_gate"], "holonomy_lab.reality_residual")
    run.check("negative_control_reality", neg_reality, ">", tol["negative_control"], "holonomy_lab.reality_residual")
    run.check("negative_control_gated", int(neg_res.verdict == "hypothesis-failed"), "==", 1,
              "holonomy_lab.parallel_holonomy_test")

    lab = run.op("holonomy_lab.HolonomyLab", HolonomyLab, P, 0.3, cfg["K"], t=t)
    tw = zr = 0.0
    for i, x in enumerate(xs):
        a = twistor_equation_residual(lab.ag, lab.fields.omega, x)
        b = zrm_residual(lab.ag, lab.fields.omega, x)
        tw, zr = max(tw, a), max(zr, b)
        run.row("twistor", t=t, point=i, twistor=a, zrm=b, imag_ratio=lab.fields.at(x).imag_ratio)
    run.log.append({"op": "holonomy_lab.twistor_equation_residual", "params": {"t": t, "points": len(xs)}})
    run.log.append({"op": "holonomy_lab.zrm_residual", "params": {"t": t, "points": len(xs)}})
    run.check("twistor_equation", tw, "<", tol["twistor"], "holonomy_lab.twistor_equation_residual")
    run.check("zrm", zr, "<", tol["zrm"], "holonomy_lab.zrm_residual")

    lp = cfg["loops"]
    fam = loop_family(xs[0], lp["side"], lp["n_random"], lp["steps"], seed)
    loops = fam[: lp["squares"]] + fam[2 * p - 1:]
    res = run.op("holonomy_lab.parallel_holonomy_test", parallel_holonomy_test, lab.ag, lab.fields.root, loops,
                 tol["holonomy"], reality, tol["reality_gate"], loops=len(loops), side=lp["side"],
                 steps=lp["steps"])
    run.row("holonomy", t=t, loops=len(loops), defect=res.defect, det_defect=res.det_defect, verdict=res.verdict)
    run.check("holonomy_defect", res.defect, "<", tol["holonomy"], "holonomy_lab.parallel_holonomy_test")
    run.check("holonomy_det_defect", res.det_defect, "<", tol["holonomy"], "holonomy_lab.parallel_holonomy_test")


_PIPELINES = {"flat-check": _pipe_flat_check, "deform": _pipe_deform,
              "twistor-transport": _pipe_twistor_transport, "involutivity": _pipe_involutivity,
              "cech": _pipe_cech, "disks": _pipe_disks, "roundtrip": _pipe_roundtrip, "holonomy": _pipe_holonomy}


# -- bundles ----------------------------------------------------------------------------------

@dataclass
class ReportBundle:
    report: dict
    tables: dict[str, list[dict]] = field(default_factory=dict)
    path: Path | None = None

    @property
    def pipeline(self) -> str:
        return self.report["pipeline"]

    @property
    def passed(self) -> bool:
        return self.report["verdict"] == "PASS"

    def verdict(self, name: str) -> dict:
        for v in self.report["verdicts"]:
            if v["name"] == name:
                return v
        raise KeyError(name)

    def files(self) -> dict[str, str]:
        out = {"report.json": json.dumps(self.report, sort_keys=True, indent=2) + "\n",
               "config.json": json.dumps(self.report["config"], sort_keys=True, indent=2) + "\n"}
        for name, rows in sorted(self.tables.items()):
            out[f"tables/{name}.csv"] = _csv(rows)
        return out

    def write(self, out) -> Path:
        """Write all files into a sibling temp dir, then swap it into place."""
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if out.exists() and any(out.iterdir()) and not (out / "report.json").exists():
            raise FileExistsError(f"{out} exists and is not a report bundle")
        tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
        try:
            for rel, text in self.files().items():
                dest = tmp / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                dest.write_text(text)
            if out.exists():
                trash = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
                os.replace(out, trash / "old")
                os.replace(tmp, out)
                shutil.rmtree(trash)
            else:
                os.replace(tmp, out)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)
        self.path = out
        return out

    @classmethod
    def load(cls, path) -> "ReportBundle":
        path = Path(path)
        report = json.loads((path / "report.json").read_text())
        tables = {}
        for f in sorted((path / "tables").glob("*.csv")):
            with f.open(newline="") as fh:
                tables[f.stem] = [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]
        return cls(report, tables, path)


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(s: str):
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def _csv(rows: list[dict]) -> str:
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in cols])
    return buf.getvalue()


def run(config: ExperimentConfig | dict, out=None) -> ReportBundle:
    """Execute the configured pipeline; write the bundle to ``out`` when given."""
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    r = _Run()
    np.random.seed(config["seed"] % 2 ** 32)
    _PIPELINES[config["pipeline"]](config.data, r)
    report = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "pipeline": config["pipeline"],
        "config": config.data,
        "config_hash": config.hash(),
        "verdict": "PASS" if all(v["pass"] for v in r.verdicts) else "FAIL",
        "verdicts": r.verdicts,
        "run_log": r.log,
        "tables": sorted(r.tables),
    }
    bundle = ReportBundle(json.loads(json.dumps(report)), r.tables)
    if out is not None:
        bundle.write(out)
    return bundle


# -- compare -------------------------------------------------------------------------------------

@dataclass
class DiffReport:
    pipeline: str
    verdict_deltas: dict[str, dict] = field(default_factory=dict)
    table_deltas: dict[str, list[dict]] = field(default_factory=dict)
    structural: list[str] = field(default_factory=list)

    def empty(self) -> bool:
        return not (self.verdict_deltas or self.table_deltas or self.structural)

    def max_delta(self, table: str, column: str) -> float:
        return max((abs(d["delta"]) for d in self.table_deltas.get(table, []) if d["column"] == column),
                   default=0.0)

    def to_json(self) -> str:
        return json.dumps({"pipeline": self.pipeline, "verdict_deltas": self.verdict_deltas,
                           "table_deltas": self.table_deltas, "structural": self.structural},
                          sort_keys=True, indent=2) + "\n"


def _delta(a, b):
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        return None if a == b else b - a
    return None if a == b else "changed"


def compare(bundle_a, bundle_b) -> DiffReport:
    """Field-by-field deltas (b - a) between two bundles of the same pipeline."""
    a = bundle_a if isinstance(bundle_a, ReportBundle) else ReportBundle.load(bundle_a)
    b = bundle_b if isinstance(bundle_b, ReportBundle) else ReportBundle.load(bundle_b)
    if a.pipeline != b.pipeline:
        raise PipelineMismatchError(f"cannot compare {a.pipeline} with {b.pipeline}")
    diff = DiffReport(a.pipeline)
    va = {v["name"]: v for v in a.report["verdicts"]}
    vb = {v["name"]: v for v in b.report["verdicts"]}
    for name in sorted(set(va) | set(vb)):
        if name not in va or name not in vb:
            diff.structural.append(f"verdict {name} only in {'b' if name in vb else 'a'}")
            continue
        d = _delta(va[name]["value"], vb[name]["value"])
        if d is not None or va[name]["pass"] != vb[name]["pass"]:
            diff.verdict_deltas[name] = {"a": va[name]["value"], "b": vb[name]["value"], "delta": d,
                                         "pass_a": va[name]["pass"], "pass_b": vb[name]["pass"]}
    for t in sorted(set(a.tables) | set(b.tables)):
        if t not in a.tables or t not in b.tables:
            diff.structural.append(f"table {t} only in {'b' if t in b.tables else 'a'}")
            continue
        ra, rb = a.tables[t], b.tables[t]
        if len(ra) != len(rb):
            diff.structural.append(f"table {t}: {len(ra)} vs {len(rb)} rows")
        for i, (x, y) in enumerate(zip(ra, rb)):
            for col in sorted(set(x) | set(y)):
                d = _delta(x.get(col), y.get(col))
                if d is not None:
                    diff.table_deltas.setdefault(t, []).append(
                        {"row": i, "column": col, "a": x.get(col), "b": y.get(col), "delta": d})
    return diff


# -- command line ------------------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="agtwistor", description="Run an experiment pipeline and write a report bundle.")
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--pipeline", choices=PIPELINES, help="run a pipeline with default settings")
    ap.add_argument("--out", help="output directory for the bundle")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field; nested keys use dots, values parse as JSON")
    ap.add_argument("--compare", nargs=2, metavar=("A", "B"), help="diff two existing bundles and exit")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.compare:
            diff = compare(*args.compare)
            sys.stdout.write(diff.to_json())
            return 0 if diff.empty() else 1
        if args.config:
            cfg = load_config(args.config)
        elif args.pipeline:
            cfg = ExperimentConfig.from_dict({"pipeline": args.pipeline})
        else:
            raise ConfigError("--config", "give a config file or --pipeline")
        overrides = dict(parse_override(o) for o in args.override)
        if args.pipeline and args.config:
            overrides["pipeline"] = args.pipeline
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = cfg.with_overrides(overrides)
        start = time.perf_counter()
        bundle = run(cfg, args.out)
    except (ConfigError, PipelineMismatchError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pipeline failure: report with context, not a traceback
        print(f"error: {type(exc).__name__} in pipeline: {exc}", file=sys.stderr)
        return 2
    for v in bundle.report["verdicts"]:
        print(f"{'PASS' if v['pass'] else 'FAIL'}  {v['name']} = {v['value']} ({v['op']} {v['threshold']})")
    print(f"{bundle.report['verdict']}  {cfg['pipeline']}  ({time.perf_counter() - start:.1f} s)", file=sys.stderr)
    return 0 if bundle.passed else 1


if __name__ == "__main__":
    sys.exit(main())
