"""Locating conjugate-point candidates and the third-order necessary condition.

A terminal point zbar is a candidate when the terminal-to-initial map
z -> x(0, z) degenerates: det x_z(0, zbar) = 0, detected numerically through
the smallest singular value.  For a candidate with unit kernel direction v,
the scalar

    kappa = (p_z(0, zbar) v) . x_zz(0, zbar)(v x v)

must vanish if the candidate's control is a weak local minimizer; a clearly
nonzero kappa certifies non-minimality.  Whether the control actually is a
weak local minimizer is not decided here: candidates are reported as
candidates, and kappa != 0 as "excluded if minimizing".
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from conjpt.pontryagin import solve_extremal, solve_variational
from conjpt.problem import ProblemSpec

__all__ = ["ConjugateCandidate", "det_xz", "scan", "necessary_condition"]

SINGULAR_RTOL = 1e-6  # sigma_min <= SINGULAR_RTOL * ||x_z||_2 declares a kernel


@dataclass(frozen=True)
class ConjugateCandidate:
    """A near-singular point of z -> x(0, z).

    ``x0`` is the candidate conjugate point x(0, z); ``v`` is the unit right
    singular vector of the smallest singular value, sign-normalized so its
    largest-magnitude entry is positive.  ``kappa`` is filled by
    :func:`necessary_condition`.
    """

    z: np.ndarray
    x0: np.ndarray
    det_value: float
    sigma_min: float
    v: np.ndarray
    kappa: float | None = None
    refined: bool = True
    sigma_max: float = 1.0

    @property
    def accepted(self) -> bool:
        """Numerical-kernel test: sigma_min below the relative threshold."""
        return bool(self.sigma_min <= SINGULAR_RTOL * max(self.sigma_max, 1e-300))


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _det_point(spec: ProblemSpec, z, steps: int, backend: str | None):
    traj = solve_extremal(spec, z, steps=steps, backend=backend)
    bund = solve_variational(traj, backend=backend)
    xz0 = bund.x_z[0]
    det = float(np.linalg.det(xz0))
    _, svals, vt = np.linalg.svd(xz0)
    v = _sign_normalize(vt[-1])
    return det, float(svals[-1]), float(svals[0]), v, traj.x[0]


def det_xz(spec: ProblemSpec, z, steps: int = 400, backend: str | None = None):
    """(det, sigma_min, kernel direction) of x_z(0, z) via the ODE solvers."""
    det, smin, _, v, _ = _det_point(spec, z, steps, backend)
    return det, smin, v


def necessary_condition(spec: ProblemSpec, candidate: ConjugateCandidate,
                        steps: int = 400, backend: str | None = None) -> float:
    """kappa = (p_z(0,z) v) . x_zz(0,z)(v x v) for the candidate's kernel direction."""
    traj = solve_extremal(spec, candidate.z, steps=steps, backend=backend)
    bund = solve_variational(traj, direction=candidate.v, backend=backend)
    q = bund.p_z[0] @ candidate.v
    return float(q @ bund.xzz_vv[0])


def verdict(kappa: float | None, tol: float = 1e-6) -> str:
    """Interpretation label for a candidate's necessary-condition value.

    Whether the candidate's control actually is a weak local minimizer is not
    decided here (that is an assumption, not a computed fact); a clearly
    nonzero kappa only excludes minimality.
    """
    if kappa is None:
        return "candidate"
    if abs(kappa) > tol:
        return "excluded_if_minimizing"
    return "consistent_with_minimality"


def attach_kappa(spec: ProblemSpec, candidate: ConjugateCandidate,
                 steps: int = 400, backend: str | None = None) -> ConjugateCandidate:
    return replace(candidate, kappa=necessary_condition(spec, candidate, steps, backend))


def _bisect_edge(det_fn, za, zb, fa, fb, tol_abs: float, max_iter: int = 120):
    """Bisection for a sign change of det along the segment [za, zb]."""
    za = np.array(za, dtype=float)
    zb = np.array(zb, dtype=float)
    for _ in range(max_iter):
        zm = 0.5 * (za + zb)
        fm = det_fn(zm)
        if abs(fm) <= tol_abs or np.linalg.norm(zb - za) < 1e-15 * (1 + np.linalg.norm(za)):
            return zm, fm
        if fa * fm < 0:
            zb, fb = zm, fm
        else:
            za, fa = zm, fm
    return 0.5 * (za + zb), det_fn(0.5 * (za + zb))


def _newton_refine(det_fn, z0, tol_abs: float, max_iter: int = 60):
    """Damped Newton on det via central differences (seeded refinement, n > 3
    or user seeds away from grid edges)."""
    z = np.array(z0, dtype=float)
    f = det_fn(z)
    h = 1e-6 * (1.0 + np.linalg.norm(z))
    for _ in range(max_iter):
        if abs(f) <= tol_abs:
            return z, f
        g = np.array([
            (det_fn(z + h * e) - det_fn(z - h * e)) / (2 * h)
            for e in np.eye(z.size)
        ])
        gn2 = float(g @ g)
        if gn2 == 0.0:
            return z, f
        step = -f * g / gn2
        lam = 1.0
        for _ in range(20):
            z_try = z + lam * step
            f_try = det_fn(z_try)
            if abs(f_try) < abs(f):
                z, f = z_try, f_try
                break
            lam *= 0.5
        else:
            return z, f
    return z, f


def scan(spec: ProblemSpec, box, resolution: int, steps: int = 400,
         backend: str | None = None, refine_rtol: float = 1e-10,
         coarse_sigma_rtol: float = 1e-4, seeds=None,
         compute_kappa: bool = False, det_grid_out: dict | None = None):
    """Locate conjugate-point candidates over an axis-aligned box.

    Evaluates det x_z(0, z) on a dense grid (n <= 3), brackets sign changes
    along grid edges and refines each bracket by bisection to
    |det| <= refine_rtol * scale with scale = max(1, max |det| on the grid).
    Nodes whose sigma_min falls below ``coarse_sigma_rtol * ||x_z||`` are also
    emitted (they catch sign-definite degeneracies that bisection cannot
    bracket).  For n > 3 pass explicit ``seeds``; each is refined by a damped
    Newton iteration on det.

    Returns deduplicated candidates sorted lexicographically by z.  With
    ``compute_kappa`` the necessary-condition value is attached to each.
    ``det_grid_out``, when given, receives the grid axes and det values
    (plot/diagnostic data).
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2 per axis")
    box = [tuple(map(float, b)) for b in box]
    if len(box) != spec.n:
        raise ValueError(f"box must have {spec.n} axis ranges")

    cache: dict[tuple, tuple] = {}

    def probe(z):
        key = tuple(np.round(np.asarray(z, dtype=float), 14))
        if key not in cache:
            cache[key] = _det_point(spec, np.asarray(z, dtype=float), steps, backend)
        return cache[key]

    def det_of(z):
        return probe(z)[0]

    raw: list[tuple[np.ndarray, float, bool]] = []  # (z, det, refined)

    if spec.n <= 3 and seeds is None:
        axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
        grid_idx = list(itertools.product(*[range(resolution)] * spec.n))
        dets = {}
        for idx in grid_idx:
            z = np.array([axes[a][i] for a, i in enumerate(idx)])
            dets[idx] = probe(z)
        scale = max(1.0, max(abs(d[0]) for d in dets.values()))
        tol_abs = refine_rtol * scale
        if det_grid_out is not None:
            det_grid_out["axes"] = axes
            det_grid_out["det"] = {idx: dets[idx][0] for idx in grid_idx}
            det_grid_out["sigma_min"] = {idx: dets[idx][1] for idx in grid_idx}
        # near-singular nodes
        for idx in grid_idx:
            det, smin, smax, v, x0 = dets[idx]
            z = np.array([axes[a][i] for a, i in enumerate(idx)])
            if abs(det) <= tol_abs or smin <= coarse_sigma_rtol * max(smax, 1e-300):
                raw.append((z, det, abs(det) <= tol_abs))
        # sign-change edges
        for idx in grid_idx:
            for a in range(spec.n):
                if idx[a] + 1 >= resolution:
                    continue
                jdx = tuple(i + 1 if k == a else i for k, i in enumerate(idx))
                fa, fb = dets[idx][0], dets[jdx][0]
                if fa * fb < 0:
                    za = np.array([axes[k][i] for k, i in enumerate(idx)])
                    zb = np.array([axes[k][i] for k, i in enumerate(jdx)])
                    zr, fr = _bisect_edge(det_of, za, zb, fa, fb, tol_abs)
                    raw.append((zr, fr, True))
        cell = np.array([(hi - lo) / (resolution - 1) for lo, hi in box])
        cluster_radius = 0.35 * float(np.linalg.norm(cell))
    else:
        if seeds is None:
            raise ValueError("dense scans require n <= 3; pass seeds for higher n")
        seeds = [np.asarray(s, dtype=float) for s in seeds]
        scale = max(1.0, max(abs(det_of(s)) for s in seeds))
        tol_abs = refine_rtol * scale
        for s in seeds:
            zr, fr = _newton_refine(det_of, s, tol_abs)
            raw.append((zr, fr, abs(fr) <= tol_abs))
        cluster_radius = 1e-5 * (1.0 + float(np.linalg.norm(box, np.inf)))

    # deduplicate: cluster nearby hits, keep the smallest |det| representative
    raw.sort(key=lambda t: abs(t[1]))
    chosen: list[tuple[np.ndarray, float, bool]] = []
    for z, d, refined in raw:
        if any(np.linalg.norm(z - c[0]) <= cluster_radius for c in chosen):
            continue
        chosen.append((z, d, refined))

    out = []
    for z, d, refined in chosen:
        det, smin, smax, v, x0 = probe(z)
        cand = ConjugateCandidate(
            z=z, x0=x0, det_value=det, sigma_min=smin, v=v,
            refined=refined, sigma_max=smax,
        )
        if compute_kappa:
            cand = attach_kappa(spec, cand, steps=steps, backend=backend)
        out.append(cand)
    out.sort(key=lambda c: tuple(c.z))
    return out
