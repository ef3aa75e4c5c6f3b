"""Batch front end: JSON config in, machine-readable results out.

Subcommands: solve, sens, scan, kappa, oracle, hmodel, omega, perturb,
boxcount.  Each writes ``result.json`` (summary, config hash, versions,
timings, tolerances) plus CSV tables into the output directory; ``--plot``
additionally writes an SVG determinant contour for planar problems and a
plot-ready CSV otherwise.

Exit codes: 0 success, 1 config error (stderr names the JSON pointer),
2 numerical failure, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

import conjpt
from conjpt import calvar, catalog, conjugate, replay
from conjpt import pontryagin as pt
from conjpt import problem as pb
from conjpt._backend import default_backend
from conjpt.errors import SolverError

COMMANDS = ("solve", "sens", "scan", "kappa", "oracle", "hmodel", "omega",
            "perturb", "boxcount")

_NUMERIC_DEFAULTS = {
    "steps": 400,
    "newton_tol": 1e-12,
    "singular_rtol": 1e-6,
    "det_refine_rtol": 1e-10,
    "coarse_sigma_rtol": 1e-4,
    "residual_tol": 1e-9,
    "dedupe_tol": 1e-5,
    "transversality_rtol": 1e-6,
    "phi_fd_step": 1e-4,
    "oracle_h": 1e-2,
}


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"config error at {pointer}: {message}")
        self.pointer = pointer


def _need(obj: dict, key: str, pointer: str, types=None):
    if key not in obj:
        raise ConfigError(f"{pointer}/{key}", "missing required key")
    val = obj[key]
    if types is not None and not isinstance(val, types):
        raise ConfigError(f"{pointer}/{key}",
                          f"expected {types}, got {type(val).__name__}")
    return val


def _opt(obj: dict, key: str, default, pointer: str, types=None):
    if key not in obj or obj[key] is None:
        return default
    if types is not None and not isinstance(obj[key], types):
        raise ConfigError(f"{pointer}/{key}",
                          f"expected {types}, got {type(obj[key]).__name__}")
    return obj[key]


def _positive(value, pointer: str):
    if not (isinstance(value, (int, float)) and value > 0):
        raise ConfigError(pointer, "must be a positive number")
    return float(value)


def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError("/", f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("/", "top level must be an object")
    schema = _opt(cfg, "schema", 1, "", int)
    if schema != 1:
        raise ConfigError("/schema", f"unsupported schema version {schema}")
    return cfg


def build_problem(cfg: dict):
    """(spec, mode) from the problem block; builtins override explicit fields."""
    prob = _need(cfg, "problem", "", dict)
    builtin = _opt(prob, "builtin", None, "/problem", str)
    if builtin is not None:
        try:
            spec = catalog.build(builtin)
        except KeyError as exc:
            raise ConfigError("/problem/builtin", str(exc)) from exc
        return spec, catalog.mode_of(builtin)
    mode = _need(prob, "mode", "/problem", str)
    if mode not in ("cov", "general"):
        raise ConfigError("/problem/mode", "must be 'cov' or 'general'")
    n = _need(prob, "n", "/problem", int)
    if n < 1:
        raise ConfigError("/problem/n", "must be >= 1")
    T = _positive(_need(prob, "T", "/problem", (int, float)), "/problem/T")
    psi_text = _need(prob, "psi", "/problem", str)
    box_radius = _positive(_opt(prob, "box_radius", 5.0, "/problem", (int, float)),
                           "/problem/box_radius")
    try:
        psi = pb.TerminalCost4.from_expr(psi_text, n)
    except ValueError as exc:
        raise ConfigError("/problem/psi", str(exc)) from exc
    cut = _opt(prob, "psi_cutoff_radius", None, "/problem", (int, float))
    if cut is not None:
        psi = pb.windowed_cost(psi, _positive(cut, "/problem/psi_cutoff_radius"))
    L_text = _need(prob, "L", "/problem", str)
    if mode == "cov":
        try:
            spec = pb.cov_problem(L_text, psi, T, n)
        except ValueError as exc:
            raise ConfigError("/problem/L", str(exc)) from exc
        spec = pb.ProblemSpec(horizon=spec.horizon, n=spec.n, m=spec.m,
                              fields=spec.fields, cost=spec.cost,
                              terminal=spec.terminal, box_radius=box_radius,
                              label="config")
        return spec, "cov"
    m = _need(prob, "m", "/problem", int)
    if m < 1:
        raise ConfigError("/problem/m", "must be >= 1")
    f0 = _need(prob, "f0", "/problem", list)
    f_list = _need(prob, "f", "/problem", list)
    if len(f_list) != m:
        raise ConfigError("/problem/f", f"expected {m} control fields")
    try:
        spec = pb.control_affine_problem(f0, f_list, L_text, psi, T, n, m,
                                         box_radius=box_radius, label="config")
    except ValueError as exc:
        raise ConfigError("/problem", str(exc)) from exc
    return spec, "general"


def _numerics(cfg: dict) -> dict:
    block = _opt(cfg, "numerics", {}, "", dict)
    out = dict(_NUMERIC_DEFAULTS)
    for key, val in block.items():
        if key not in _NUMERIC_DEFAULTS:
            raise ConfigError(f"/numerics/{key}", "unknown numerics key")
        out[key] = _positive(val, f"/numerics/{key}") if key != "steps" else int(val)
    if out["steps"] < 16 or out["steps"] % 2:
        raise ConfigError("/numerics/steps", "must be an even integer >= 16")
    return out


def _vector(obj, length: int, pointer: str) -> np.ndarray:
    arr = np.asarray(obj, dtype=float)
    if arr.shape != (length,):
        raise ConfigError(pointer, f"expected a vector of length {length}")
    return arr


# ---------------------------------------------------------------------------
# output helpers

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _svg_det_contour(axes, det: np.ndarray, points, path: Path) -> None:
    """Sign map of det on the grid with marching-squares zero segments."""
    xs, ys = axes
    nx, ny = len(xs), len(ys)
    W, H = 640, 640
    pad = 40

    def sx(x):
        return pad + (x - xs[0]) / (xs[-1] - xs[0]) * (W - 2 * pad)

    def sy(y):
        return H - pad - (y - ys[0]) / (ys[-1] - ys[0]) * (H - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
             f'viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>']
    for i in range(nx - 1):
        for j in range(ny - 1):
            if det[i, j] < 0:
                parts.append(
                    f'<rect x="{sx(xs[i]):.2f}" y="{sy(ys[j + 1]):.2f}" '
                    f'width="{sx(xs[i + 1]) - sx(xs[i]):.2f}" '
                    f'height="{sy(ys[j]) - sy(ys[j + 1]):.2f}" '
                    f'fill="#dce9f7" stroke="none"/>')
    # marching squares on the sign of det
    def interp(x0, y0, v0, x1, y1, v1):
        t = v0 / (v0 - v1) if v0 != v1 else 0.5
        return x0 + t * (x1 - x0), y0 + t * (y1 - y0)

    segs = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            corners = [
                (xs[i], ys[j], det[i, j]),
                (xs[i + 1], ys[j], det[i + 1, j]),
                (xs[i + 1], ys[j + 1], det[i + 1, j + 1]),
                (xs[i], ys[j + 1], det[i, j + 1]),
            ]
            crossings = []
            for a in range(4):
                x0, y0, v0 = corners[a]
                x1, y1, v1 = corners[(a + 1) % 4]
                if (v0 < 0) != (v1 < 0):
                    crossings.append(interp(x0, y0, v0, x1, y1, v1))
            if len(crossings) >= 2:
                segs.append((crossings[0], crossings[1]))
            if len(crossings) == 4:
                segs.append((crossings[2], crossings[3]))
    for (x0, y0), (x1, y1) in segs:
        parts.append(f'<line x1="{sx(x0):.2f}" y1="{sy(y0):.2f}" '
                     f'x2="{sx(x1):.2f}" y2="{sy(y1):.2f}" '
                     'stroke="black" stroke-width="1.2"/>')
    for z in points:
        parts.append(f'<circle cx="{sx(z[0]):.2f}" cy="{sy(z[1]):.2f}" r="4" '
                     'fill="none" stroke="#c62828" stroke-width="1.6"/>')
    parts.append(
        f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" '
        'fill="none" stroke="#555" stroke-width="1"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# command implementations (each returns summary dict and list of files)

def _cmd_solve(cfg, spec, mode, num, out, plot, pool):
    block = _need(cfg, "solve", "", dict)
    z = _vector(_need(block, "z", "/solve"), spec.n, "/solve/z")
    traj = pt.solve_extremal(spec, z, steps=num["steps"], newton_tol=num["newton_tol"])
    header = (["t"] + [f"x{i+1}" for i in range(spec.n)]
              + [f"p{i+1}" for i in range(spec.n)]
              + [f"u{i+1}" for i in range(spec.m)] + ["gamma"])
    rows = [
        [traj.times[j], *traj.x[j], *traj.p[j], *traj.u[j], traj.gamma[j]]
        for j in range(len(traj.times))
    ]
    _write_csv(out / "trajectory.csv", header, rows)
    summary = {
        "z": list(z), "cost": traj.cost, "x0": list(traj.x[0]),
        "stationarity_residual": traj.stationarity_residual(),
    }
    return summary, ["trajectory.csv"]


def _cmd_sens(cfg, spec, mode, num, out, plot, pool):
    block = _need(cfg, "sens", "", dict)
    z = _vector(_need(block, "z", "/sens"), spec.n, "/sens/z")
    v = block.get("v")
    if v is not None:
        v = _vector(v, spec.n, "/sens/v")
        v = v / np.linalg.norm(v)
    traj = pt.solve_extremal(spec, z, steps=num["steps"], newton_tol=num["newton_tol"])
    bund = pt.solve_variational(traj, direction=v)
    n, m = spec.n, spec.m
    header = ["t"]
    header += [f"xz{a+1}{b+1}" for a in range(n) for b in range(n)]
    header += [f"pz{a+1}{b+1}" for a in range(n) for b in range(n)]
    header += [f"uz{i+1}{b+1}" for i in range(m) for b in range(n)]
    if v is not None:
        header += [f"xzz{a+1}" for a in range(n)]
        header += [f"uzz{i+1}" for i in range(m)]
        header += [f"w{a+1}" for a in range(n)]
    rows = []
    for j in range(len(traj.times)):
        row = [traj.times[j], *bund.x_z[j].ravel(), *bund.p_z[j].ravel(),
               *bund.u_z[j].ravel()]
        if v is not None:
            row += [*bund.xzz_vv[j], *bund.uzz_vv[j], *bund.w[j]]
        rows.append(row)
    _write_csv(out / "sensitivity.csv", header, rows)
    xz0 = bund.x_z[0]
    svals = np.linalg.svd(xz0, compute_uv=False)
    summary = {
        "z": list(z), "det_xz0": float(np.linalg.det(xz0)),
        "sigma_min": float(svals[-1]), "sigma_max": float(svals[0]),
    }
    if v is not None:
        summary["v"] = list(v)
        summary["xzz_vv0"] = list(bund.xzz_vv[0])
    return summary, ["sensitivity.csv"]


def _candidate_rows(cands):
    rows = []
    for c in cands:
        rows.append([*c.z, c.det_value, c.sigma_min, *c.v,
                     c.kappa if c.kappa is not None else float("nan")])
    return rows


def _cmd_scan(cfg, spec, mode, num, out, plot, pool):
    block = _need(cfg, "scan", "", dict)
    box = _need(block, "box", "/scan", list)
    if len(box) != spec.n:
        raise ConfigError("/scan/box", f"expected {spec.n} axis ranges")
    resolution = _opt(block, "resolution", 41, "/scan", int)
    seeds = block.get("seeds")
    grid_out: dict = {}
    cands = conjugate.scan(
        spec, box, resolution, steps=num["steps"],
        refine_rtol=num["det_refine_rtol"], coarse_sigma_rtol=num["coarse_sigma_rtol"],
        seeds=seeds, compute_kappa=True, det_grid_out=grid_out)
    n = spec.n
    header = ([f"z{i+1}" for i in range(n)] + ["det", "sigma_min"]
              + [f"v{i+1}" for i in range(n)] + ["kappa"])
    _write_csv(out / "candidates.csv", header, _candidate_rows(cands))
    files = ["candidates.csv"]
    if plot and grid_out:
        axes = grid_out["axes"]
        if n == 2:
            det = np.array([[grid_out["det"][(i, j)] for j in range(resolution)]
                            for i in range(resolution)])
            _svg_det_contour((axes[0], axes[1]), det, [c.z for c in cands],
                             out / "det_contour.svg")
            files.append("det_contour.svg")
        rows = []
        for idx, d in sorted(grid_out["det"].items()):
            rows.append([*(axes[a][i] for a, i in enumerate(idx)), d,
                         grid_out["sigma_min"][idx]])
        _write_csv(out / "detgrid.csv",
                   [f"z{i+1}" for i in range(n)] + ["det", "sigma_min"], rows)
        files.append("detgrid.csv")
    summary = {
        "candidates": len(cands),
        "z": [list(c.z) for c in cands],
        "kappa": [c.kappa for c in cands],
        "verdict": [conjugate.verdict(c.kappa) for c in cands],
        "note": "weak local minimality of each candidate is assumed, not verified",
    }
    return summary, files


def _cmd_kappa(cfg, spec, mode, num, out, plot, pool):
    block = _opt(cfg, "kappa", None, "", dict)
    if block is not None and "z" in block and block["z"] is not None:
        pts = [_vector(zz, spec.n, f"/kappa/z/{i}") for i, zz in enumerate(block["z"])]
        cands = []
        for z in pts:
            det, smin, v = conjugate.det_xz(spec, z, steps=num["steps"])
            traj = pt.solve_extremal(spec, z, steps=num["steps"])
            cands.append(conjugate.ConjugateCandidate(
                z=z, x0=traj.x[0], det_value=det, sigma_min=smin, v=v))
    else:
        if "scan" not in cfg:
            raise ConfigError("/kappa", "needs either kappa.z or a scan block")
        cands = conjugate.scan(
            spec, _need(cfg["scan"], "box", "/scan", list),
            _opt(cfg["scan"], "resolution", 41, "/scan", int),
            steps=num["steps"], refine_rtol=num["det_refine_rtol"],
            coarse_sigma_rtol=num["coarse_sigma_rtol"], seeds=cfg["scan"].get("seeds"))

    def one(c):
        return conjugate.attach_kappa(spec, c, steps=num["steps"])

    cands = list(pool.map(one, cands)) if pool else [one(c) for c in cands]
    n = spec.n
    header = ([f"z{i+1}" for i in range(n)] + ["det", "sigma_min"]
              + [f"v{i+1}" for i in range(n)] + ["kappa"])
    _write_csv(out / "kappa.csv", header, _candidate_rows(cands))
    summary = {
        "points": len(cands),
        "kappa": [c.kappa for c in cands],
        "verdict": [conjugate.verdict(c.kappa) for c in cands],
        "note": "weak local minimality of each candidate is assumed, not verified",
    }
    return summary, ["kappa.csv"]


def _cmd_oracle(cfg, spec, mode, num, out, plot, pool):
    block = _opt(cfg, "oracle", {}, "", dict)
    h = _opt(block, "h", num["oracle_h"], "/oracle", (int, float))
    if "z" in block and block["z"] is not None:
        z = _vector(block["z"], spec.n, "/oracle/z")
        if "v" in block and block["v"] is not None:
            v = _vector(block["v"], spec.n, "/oracle/v")
            v = v / np.linalg.norm(v)
            det, smin, _ = conjugate.det_xz(spec, z, steps=num["steps"])
        else:
            det, smin, v = conjugate.det_xz(spec, z, steps=num["steps"])
        traj = pt.solve_extremal(spec, z, steps=num["steps"])
        cand = conjugate.ConjugateCandidate(
            z=z, x0=traj.x[0], det_value=det, sigma_min=smin, v=v)
    else:
        if "scan" not in cfg:
            raise ConfigError("/oracle", "needs either oracle.z or a scan block")
        cands = conjugate.scan(
            spec, _need(cfg["scan"], "box", "/scan", list),
            _opt(cfg["scan"], "resolution", 41, "/scan", int),
            steps=num["steps"], refine_rtol=num["det_refine_rtol"],
            coarse_sigma_rtol=num["coarse_sigma_rtol"])
        if not cands:
            raise SolverError("oracle: the scan found no candidates")
        cand = cands[0]
    chk = replay.check_candidate(spec, cand, h=float(h), steps=num["steps"])
    rows = sorted((th, g) for th, g in chk.probe.samples.items())
    _write_csv(out / "gstencil.csv", ["theta", "g"], rows)
    summary = {
        "z": list(cand.z), "v": list(cand.v),
        "g0": chk.probe.value, "g1": chk.d1, "g2": chk.d2, "g3": chk.d3,
        "kappa": chk.kappa, "pass": bool(chk.passed),
        "tol_low": chk.tol_low, "tol_third": chk.tol_third,
    }
    return summary, ["gstencil.csv"]


def _require_cov(mode):
    if mode != "cov":
        raise ConfigError("/problem/mode", "this command requires mode == 'cov'")


def _cmd_hmodel(cfg, spec, mode, num, out, plot, pool):
    _require_cov(mode)
    model = calvar.HamiltonianModel.from_spec(spec)
    block = _opt(cfg, "hmodel", {}, "", dict)
    n = spec.n
    if "p" in block and block["p"] is not None:
        P = [
            _vector(pp, n, f"/hmodel/p/{i}") for i, pp in enumerate(block["p"])
        ]
    else:
        radius = _opt(block, "radius", 2.0, "/hmodel", (int, float))
        per_axis = _opt(block, "per_axis", 5, "/hmodel", int)
        axes = [np.linspace(-radius, radius, per_axis) for _ in range(n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        P = list(np.column_stack([mm.ravel() for mm in mesh]))
    header = ([f"p{i+1}" for i in range(n)] + ["H"]
              + [f"DH{i+1}" for i in range(n)]
              + [f"D2H{a+1}{b+1}" for a in range(n) for b in range(n)]
              + [f"D3H{a+1}{b+1}{c+1}" for a in range(n) for b in range(n)
                 for c in range(n)])
    rows = []
    for p in P:
        H, DH, D2H, D3H = model.derivatives(np.asarray(p, dtype=float))
        rows.append([*p, H, *DH, *D2H.ravel(), *D3H.ravel()])
    _write_csv(out / "hmodel.csv", header, rows)
    return {"points": len(P)}, ["hmodel.csv"]


def _omega_settings(cfg, spec, num):
    block = _opt(cfg, "omega", {}, "", dict)
    # lattice seeding grows as seeds^n: shrink the per-axis default with n
    default_seeds = 20 if spec.n <= 2 else 8
    return {
        "box_radius": float(_opt(block, "box_radius", min(3.0, spec.box_radius),
                                 "/omega", (int, float))),
        "seeds_per_axis": _opt(block, "seeds_per_axis", default_seeds, "/omega", int),
        "directions": _opt(block, "directions", 32, "/omega", int),
        "residual_tol": num["residual_tol"],
        "dedupe_tol": num["dedupe_tol"],
        "seed_keep_fraction": float(_opt(block, "seed_keep_fraction", 0.4,
                                         "/omega", (int, float))),
    }


def _omega_points(cfg, spec, mode, num, terminal=None):
    _require_cov(mode)
    model = calvar.HamiltonianModel.from_spec(spec)
    st = _omega_settings(cfg, spec, num)
    psi = terminal if terminal is not None else spec.terminal
    pts = calvar.omega_solve(model, psi, spec.horizon, **st)
    pts = [calvar.transversality_check(model, psi, spec.horizon, p,
                                       fd_step=num["phi_fd_step"],
                                       rtol=num["transversality_rtol"])
           for p in pts]
    return model, st, pts


def _cmd_omega(cfg, spec, mode, num, out, plot, pool):
    model, st, pts = _omega_points(cfg, spec, mode, num)
    n = spec.n
    header = ([f"z{i+1}" for i in range(n)] + [f"v{i+1}" for i in range(n)]
              + ["residual"] + [f"sv{i+1}" for i in range(n + 1)]
              + ["transversal"] + [f"x0{i+1}" for i in range(n)])
    rows = [[*p.z, *p.v, p.residual, *p.jacobian_singvals, p.transversal,
             *p.conjugate_image] for p in pts]
    _write_csv(out / "omega.csv", header, rows)
    files = ["omega.csv"]
    if plot and n == 2:
        axes = (np.linspace(-st["box_radius"], st["box_radius"], 121),) * 2
        mesh = np.meshgrid(*axes, indexing="ij")
        Z = np.column_stack([mm.ravel() for mm in mesh])
        _, g1, H2 = spec.terminal.bundle_batch(Z, 2)
        _, _, D2H, _ = model.derivatives_batch(g1)
        xz = np.eye(2)[None] - spec.horizon * np.einsum("bac,bcd->bad", D2H, H2)
        det = np.linalg.det(xz).reshape(len(axes[0]), len(axes[1]))
        _svg_det_contour(axes, det, [p.z for p in pts], out / "det_contour.svg")
        files.append("det_contour.svg")
    summary = {
        "zeros": len(pts),
        "transversal": sum(1 for p in pts if p.transversal),
        "z": [list(p.z) for p in pts],
    }
    return summary, files


def _cmd_perturb(cfg, spec, mode, num, out, plot, pool):
    _require_cov(mode)
    model = calvar.HamiltonianModel.from_spec(spec)
    block = _opt(cfg, "perturb", {}, "", dict)
    trials = _opt(block, "trials", 100, "/perturb", int)
    magnitude = _positive(_opt(block, "magnitude", 1e-2, "/perturb", (int, float)),
                          "/perturb/magnitude")
    anchors = block.get("anchors")
    st = _omega_settings(cfg, spec, num)
    box_radius = st.pop("box_radius")
    rep = calvar.genericity_experiment(
        model, spec.terminal, spec.horizon, box_radius, trials=trials,
        magnitude=magnitude, seed=int(_opt(cfg, "seed", 0, "", int)),
        anchors=anchors, omega_kwargs=st, executor=pool)
    _write_csv(out / "trials.csv",
               ["trial", "n_zeros", "n_nontransversal", "all_transversal"],
               [[r.index, r.n_zeros, r.n_nontransversal, r.all_transversal]
                for r in rep.trials])
    summary = {
        "anchors": [list(a) for a in rep.anchors],
        "base_zeros": rep.base_zeros,
        "base_nontransversal": rep.base_nontransversal,
        "fraction_restored": rep.fraction_restored,
        "control_persists": bool(rep.control_persists),
    }
    return summary, ["trials.csv"]


def _cmd_boxcount(cfg, spec, mode, num, out, plot, pool):
    model, st, pts = _omega_points(cfg, spec, mode, num)
    block = _opt(cfg, "boxcount", {}, "", dict)
    eps = _opt(block, "epsilons", [0.2, 0.1, 0.05], "/boxcount", list)
    trace = _opt(block, "trace", spec.n >= 3, "/boxcount", bool)
    if trace:
        step = _positive(_opt(block, "trace_step", 0.02, "/boxcount", (int, float)),
                         "/boxcount/trace_step")
        pts = calvar.trace_zero_sets(model, spec.terminal, spec.horizon,
                                     pts, st["box_radius"], step=step)
    rep = calvar.conjugate_image_boxcount(pts, eps)
    _write_csv(out / "boxcount.csv", ["epsilon", "count"],
               list(zip(rep.epsilons, rep.counts)))
    summary = {
        "points": len(pts),
        "epsilons": list(rep.epsilons),
        "counts": list(rep.counts),
        "slope": rep.slope,
        "saturated": rep.saturated(),
    }
    return summary, ["boxcount.csv"]


_HANDLERS = {
    "solve": _cmd_solve,
    "sens": _cmd_sens,
    "scan": _cmd_scan,
    "kappa": _cmd_kappa,
    "oracle": _cmd_oracle,
    "hmodel": _cmd_hmodel,
    "omega": _cmd_omega,
    "perturb": _cmd_perturb,
    "boxcount": _cmd_boxcount,
}


def run(command: str, config_path: str, output_dir: str, plot: bool = False,
        threads: int | None = None) -> int:
    """Execute one subcommand; returns the process exit code."""
    t0 = time.time()
    try:
        cfg = load_config(config_path)
        spec, mode = build_problem(cfg)
        num = _numerics(cfg)
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        if threads is None:
            threads = int(os.environ.get("CONJPT_THREADS", "1"))
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        try:
            summary, files = _HANDLERS[command](cfg, spec, mode, num, out, plot, pool)
        finally:
            if pool is not None:
                pool.shutdown()
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"numerical failure in {command}: {exc}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure in {command}: {exc}", file=sys.stderr)
        return 2
    except (AssertionError, RuntimeError) as exc:
        print(f"internal error in {command}: {exc}", file=sys.stderr)
        return 3

    result = {
        "schema": 1,
        "command": command,
        "config_hash": _config_hash(cfg),
        "backend": default_backend(),
        "versions": {
            "conjpt": conjpt.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "timings": {"total_s": time.time() - t0},
        "tolerances": num,
        "summary": summary,
        "outputs": files,
    }
    (out / "result.json").write_text(
        json.dumps(result, indent=2, sort_keys=True, default=float) + "\n",
        encoding="utf-8")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="conjpt",
        description="Conjugate-point analysis for control-affine Bolza problems",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON problem/run configuration")
    parser.add_argument("--out", default="conjpt-results", help="output directory")
    parser.add_argument("--plot", action="store_true",
                        help="write det-contour SVG (n=2) and plot-ready CSV")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker pool size (default CONJPT_THREADS or 1)")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.out, plot=args.plot,
               threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
