"""Closed-form fast path for the calculus-of-variations case xdot = u, L = L(u).

With a velocity-only Lagrangian the costate is constant in time and the
backward flow is explicit:

    x(0, z) = z - T DH(grad psi(z)),
    x_z(0, z) = I - T D2H(grad psi(z)) D2 psi(z),
    x_zz(0, z)(v x v) = -T [D2H D3psi(v x v) + D3H(D2psi v x D2psi v)],

where H(p) = min_w { L(w) + p . w } is the minimum-form Hamiltonian, DH its
minimizer, D2H = -[L_uu]^{-1} (symmetric negative definite) and D3H the fully
symmetric contraction of L_uuu with three copies of D2H.  (The minimum
convention makes H concave; this module uses it consistently.)

Candidate degeneracies are the zeros of

    Phi(z, v) = (x_z(0, z) v,  [D2H]^{-1} v . x_zz(0, z)(v x v))

on R^n x S^{n-1}; on the zero set the last component equals T kappa.  Zeros
are found by multistart Gauss-Newton with the sphere handled by a
normalization retraction, then classified by the numerical rank of the
restricted Jacobian: at a transversal zero the set is locally a manifold of
dimension n - 2.  Perturbation families and box-counting of the conjugate
image support the genericity experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from conjpt.errors import ControlSolveError
from conjpt.problem import (
    PerturbationParams,
    ProblemSpec,
    RunningCost3,
    TerminalCost4,
    perturbed_cost,
)
from conjpt.tape import compile_tape
from conjpt import expr as ex

__all__ = [
    "HamiltonianModel",
    "OmegaPoint",
    "closed_forms",
    "phi",
    "phi_batch",
    "omega_solve",
    "trace_zero_sets",
    "transversality_check",
    "perturb_psi",
    "genericity_experiment",
    "conjugate_image_boxcount",
    "GenericityReport",
    "BoxCountReport",
]


class HamiltonianModel:
    """Legendre data of a uniformly convex velocity Lagrangian L(u) on R^m.

    Provides the minimizer w*(p) with L_u(w*) + p = 0 and the derivatives of
    the minimum-form Hamiltonian.  Expression-backed Lagrangians evaluate in
    batch through tapes; callback Lagrangians fall back to per-point loops.
    """

    def __init__(self, cost: RunningCost3, tol: float = 1e-12, max_iter: int = 50):
        if cost.n != cost.m:
            raise ValueError("velocity Lagrangian needs m == n")
        self.m = cost.m
        self.cost = cost
        self.tol = tol
        self.max_iter = max_iter
        self._x0 = np.zeros(cost.n)
        self._tape = None
        if cost.expr is not None:
            m = cost.m
            nv = cost.n + m
            L0 = cost.expr
            L1 = [ex.differentiate(L0, cost.n + i) for i in range(m)]
            L2 = [[ex.differentiate(L1[i], cost.n + j) for j in range(m)] for i in range(m)]
            L3 = [ex.differentiate(L2[i][j], cost.n + k)
                  for i in range(m) for j in range(m) for k in range(m)]
            exprs = [L0] + L1 + [L2[i][j] for i in range(m) for j in range(m)] + L3
            self._tape = compile_tape(exprs, nv)

    @staticmethod
    def from_spec(spec: ProblemSpec) -> "HamiltonianModel":
        return HamiltonianModel(spec.cost)

    # -- pointwise ----------------------------------------------------------

    def _lu(self, w):
        return np.asarray(self.cost.grad_u(self._x0, w), dtype=float)

    def _luu(self, w):
        return np.asarray(self.cost.hess_uu(self._x0, w), dtype=float)

    def minimizer(self, p, guess=None) -> np.ndarray:
        """w*(p) = argmin_w L(w) + p . w, by damped Newton on L_u(w) = -p."""
        p = np.asarray(p, dtype=float)
        w = np.zeros(self.m) if guess is None else np.array(guess, dtype=float)
        r = self._lu(w) + p
        rn = float(np.max(np.abs(r)))
        for _ in range(self.max_iter):
            if rn <= self.tol:
                return w
            step = np.linalg.solve(self._luu(w), -r)
            lam = 1.0
            for _ in range(30):
                w_try = w + lam * step
                r_try = self._lu(w_try) + p
                rn_try = float(np.max(np.abs(r_try)))
                if rn_try < rn or rn_try <= self.tol:
                    w, r, rn = w_try, r_try, rn_try
                    break
                lam *= 0.5
            else:
                raise ControlSolveError("Legendre minimizer line search stalled")
        if rn <= self.tol:
            return w
        raise ControlSolveError(f"Legendre minimizer did not converge (residual {rn:g})")

    def derivatives(self, p):
        """(H, DH, D2H, D3H) at p."""
        p = np.asarray(p, dtype=float)
        w = self.minimizer(p)
        H = float(self.cost.value(self._x0, w) + p @ w)
        M = self._luu(w)
        D2H = -np.linalg.inv(M)
        Luuu = np.asarray(self.cost.third_uuu(self._x0, w), dtype=float)
        D3H = np.einsum("ai,jb,kc,ijk->abc", D2H, D2H, D2H, Luuu)
        return H, w, D2H, D3H

    # -- batched ------------------------------------------------------------

    def _l_blocks_batch(self, W: np.ndarray):
        """(L, L_u, L_uu, L_uuu) at a batch of velocities."""
        B, m = W.shape
        if self._tape is not None:
            X = np.concatenate([np.zeros((B, self.cost.n)), W], axis=1)
            vals = self._tape.eval_batch(X)
            o0 = 1
            o1 = o0 + m
            o2 = o1 + m * m
            return (
                vals[:, 0],
                vals[:, o0:o1],
                vals[:, o1:o2].reshape(B, m, m),
                vals[:, o2:].reshape(B, m, m, m),
            )
        L = np.empty(B)
        Lu = np.empty((B, m))
        Luu = np.empty((B, m, m))
        Luuu = np.empty((B, m, m, m))
        for i, w in enumerate(W):
            L[i] = self.cost.value(self._x0, w)
            Lu[i] = self.cost.grad_u(self._x0, w)
            Luu[i] = self.cost.hess_uu(self._x0, w)
            Luuu[i] = self.cost.third_uuu(self._x0, w)
        return L, Lu, Luu, Luuu

    def minimizer_batch(self, P: np.ndarray, strict: bool = True) -> np.ndarray:
        """Row-wise minimizers; with ``strict=False`` failed rows become NaN
        instead of raising (multistart seeding tolerates bad rows)."""
        P = np.asarray(P, dtype=float)
        B, m = P.shape
        W = np.zeros_like(P)
        with np.errstate(all="ignore"):
            _, Lu, Luu, _ = self._l_blocks_batch(W)
            R = Lu + P
            rn = np.max(np.abs(R), axis=1)
            rn[~np.isfinite(rn)] = np.inf
            active = rn > self.tol
            for _ in range(self.max_iter):
                if not np.any(active):
                    break
                step = np.zeros_like(W)
                A = Luu[active]
                ok = np.isfinite(A).all(axis=(1, 2))
                sol = np.full((A.shape[0], m), np.nan)
                if np.any(ok):
                    try:
                        sol[ok] = np.linalg.solve(A[ok], -R[active][ok][:, :, None])[:, :, 0]
                    except np.linalg.LinAlgError:
                        for idx in np.flatnonzero(ok):
                            try:
                                sol[idx] = np.linalg.solve(A[idx], -R[active][idx])
                            except np.linalg.LinAlgError:
                                pass
                step[active] = sol
                lam = np.ones(B)
                pending = active & np.isfinite(step).all(axis=1)
                stuck = active & ~pending
                rn[stuck] = np.inf
                active &= ~stuck
                for _ in range(30):
                    if not np.any(pending):
                        break
                    W_try = W + lam[:, None] * step
                    _, Lu_t, Luu_t, _ = self._l_blocks_batch(W_try)
                    R_t = Lu_t + P
                    rn_t = np.max(np.abs(R_t), axis=1)
                    rn_t[~np.isfinite(rn_t)] = np.inf
                    improved = pending & ((rn_t < rn) | (rn_t <= self.tol))
                    W[improved] = W_try[improved]
                    R[improved] = R_t[improved]
                    Luu[improved] = Luu_t[improved]
                    rn[improved] = rn_t[improved]
                    pending = pending & ~improved
                    lam[pending] *= 0.5
                if np.any(pending):
                    rn[pending] = np.inf
                    active &= ~pending
                active &= rn > self.tol
        failed = rn > self.tol
        if np.any(failed):
            if strict:
                raise ControlSolveError("batched Legendre minimizer did not converge")
            W[failed] = np.nan
        return W

    def derivatives_batch(self, P: np.ndarray, strict: bool = True):
        P = np.asarray(P, dtype=float)
        W = self.minimizer_batch(P, strict=strict)
        with np.errstate(all="ignore"):
            L, _, Luu, Luuu = self._l_blocks_batch(W)
            H = L + np.einsum("bi,bi->b", P, W)
            bad = ~np.isfinite(W).all(axis=1)
            if np.any(bad):
                Luu = Luu.copy()
                Luu[bad] = np.eye(P.shape[1])  # placeholder; rows are NaN anyway
            D2H = -np.linalg.inv(Luu)
            D3H = np.einsum("bxi,byj,bzk,bijk->bxyz", D2H, D2H, D2H, Luuu)
            if np.any(bad):
                D2H[bad] = np.nan
                D3H[bad] = np.nan
                H = H.copy()
                H[bad] = np.nan
        return H, W, D2H, D3H


def _terminal_batch(terminal: TerminalCost4, Z: np.ndarray, order: int):
    return terminal.bundle_batch(np.asarray(Z, dtype=float), order)


@dataclass(frozen=True)
class ClosedForms:
    x0: np.ndarray
    x_z: np.ndarray
    p_z: np.ndarray
    xzz_vv: np.ndarray | None = None


def closed_forms(model: HamiltonianModel, terminal: TerminalCost4, T: float,
                 z, v=None) -> ClosedForms:
    """Explicit x(0,z), x_z(0,z), p_z(0,z) and optionally x_zz(0,z)(v x v)."""
    z = np.asarray(z, dtype=float)
    g = terminal.grad(z)
    H2 = terminal.hess(z)
    _, DH, D2H, D3H = model.derivatives(g)
    x0 = z - T * DH
    xz = np.eye(z.size) - T * D2H @ H2
    out = ClosedForms(x0=x0, x_z=xz, p_z=H2)
    if v is not None:
        v = np.asarray(v, dtype=float)
        T3 = terminal.third(z)
        t3vv = np.einsum("abc,b,c->a", T3, v, v)
        h2v = H2 @ v
        d3h_term = np.einsum("abc,b,c->a", D3H, h2v, h2v)
        out = replace(out, xzz_vv=-T * (D2H @ t3vv + d3h_term))
    return out


def phi(model: HamiltonianModel, terminal: TerminalCost4, T: float, z, v) -> np.ndarray:
    """The degeneracy map: (x_z(0,z) v, [D2H]^{-1} v . x_zz(0,z)(v x v))."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    cf = closed_forms(model, terminal, T, z, v)
    g = terminal.grad(z)
    _, _, D2H, _ = model.derivatives(g)
    last = float(np.linalg.solve(D2H, v) @ cf.xzz_vv)
    return np.concatenate([cf.x_z @ v, [last]])


def phi_batch(model: HamiltonianModel, terminal: TerminalCost4, T: float,
              Z: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Vectorized phi over rows of (Z, V); returns (B, n+1)."""
    Z = np.asarray(Z, dtype=float)
    V = np.asarray(V, dtype=float)
    B, n = Z.shape
    _, g1, H2, T3 = _terminal_batch(terminal, Z, 3)
    _, _, D2H, D3H = model.derivatives_batch(g1, strict=False)
    eye = np.eye(n)
    xz = eye[None, :, :] - T * np.einsum("bac,bcd->bad", D2H, H2)
    first = np.einsum("bad,bd->ba", xz, V)
    t3vv = np.einsum("bacd,bc,bd->ba", T3, V, V)
    h2v = np.einsum("bac,bc->ba", H2, V)
    d3h_term = np.einsum("bacd,bc,bd->ba", D3H, h2v, h2v)
    xzz = -T * (np.einsum("bac,bc->ba", D2H, t3vv) + d3h_term)
    with np.errstate(all="ignore"):
        bad = ~np.isfinite(D2H).all(axis=(1, 2))
        D2H_safe = D2H.copy()
        D2H_safe[bad] = np.eye(n)
        w = np.linalg.solve(D2H_safe, V[:, :, None])[:, :, 0]
        w[bad] = np.nan
    last = np.einsum("ba,ba->b", w, xzz)
    return np.concatenate([first, last[:, None]], axis=1)


@dataclass(frozen=True)
class OmegaPoint:
    """A zero of the degeneracy map with its transversality classification.

    ``jacobian_singvals`` holds n+1 values (padded with zeros when the
    restricted Jacobian has fewer); ``transversal`` is None until
    :func:`transversality_check` runs.  ``conjugate_image`` is x(0, z).
    """

    z: np.ndarray
    v: np.ndarray
    residual: float
    conjugate_image: np.ndarray
    jacobian_singvals: np.ndarray | None = None
    transversal: bool | None = None


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _tangent_basis(V: np.ndarray) -> np.ndarray:
    """Orthonormal bases of v-perp per row via Householder reflections: the
    first n-1 columns of H with H e_n = v."""
    B, n = V.shape
    out = np.empty((B, n, n - 1))
    for i in range(B):
        v = V[i]
        e = np.zeros(n)
        e[-1] = 1.0
        u = v - e if v[-1] < 0 else v + e  # stable choice
        Hm = np.eye(n) - 2.0 * np.outer(u, u) / (u @ u)
        # columns of Hm are orthonormal; Hm[:, -1] = -/+ v, the rest span v-perp
        out[i] = Hm[:, : n - 1]
    return out


def _sphere_directions(n: int, count: int) -> np.ndarray:
    if n == 2:
        ang = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if n == 3:
        # Fibonacci sphere
        i = np.arange(count) + 0.5
        phi_g = math.pi * (3.0 - math.sqrt(5.0))
        zc = 1.0 - 2.0 * i / count
        r = np.sqrt(np.maximum(0.0, 1.0 - zc * zc))
        th = phi_g * i
        return np.column_stack([r * np.cos(th), r * np.sin(th), zc])
    rng = np.random.default_rng(12345)
    V = rng.standard_normal((count, n))
    return V / np.linalg.norm(V, axis=1, keepdims=True)


def omega_solve(model: HamiltonianModel, terminal: TerminalCost4, T: float,
                box_radius: float, seeds_per_axis: int = 20, directions: int = 32,
                residual_tol: float = 1e-9, dedupe_tol: float = 1e-5,
                max_iter: int = 80, fd_step: float = 1e-6,
                seed_keep_fraction: float = 0.4) -> list[OmegaPoint]:
    """Multistart Gauss-Newton zeros of phi on the ball of ``box_radius``.

    Seeds a lattice of terminal points times a set of unit directions (only
    the best ``seed_keep_fraction`` by initial residual is iterated; basins
    of attraction are far wider than the lattice spacing), runs damped
    Gauss-Newton with the sphere constraint handled by normalization
    retraction, keeps zeros with residual <= residual_tol inside the ball,
    canonicalizes the sign of v and deduplicates points closer than
    dedupe_tol in (z, v).

    n = 1 has no sphere freedom: zeros of x_z are located by exhaustive sign
    analysis plus minima refinement on a dense grid, then the scalar second
    component decides membership.
    """
    n = model.m
    k = float(box_radius)
    if n == 1:
        return _omega_solve_1d(model, terminal, T, k, residual_tol)

    axes = [np.linspace(-k, k, seeds_per_axis) for _ in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    Zg = np.column_stack([m.ravel() for m in mesh])
    Vg = _sphere_directions(n, directions)
    Z = np.repeat(Zg, len(Vg), axis=0)
    V = np.tile(Vg, (len(Zg), 1))

    def residual(Zc, Vc):
        return phi_batch(model, terminal, T, Zc, Vc)

    rn0 = np.linalg.norm(residual(Z, V), axis=1)
    rn0[~np.isfinite(rn0)] = np.inf
    keep_n = max(min(len(Z), 200), int(len(Z) * seed_keep_fraction))
    sel = np.argsort(rn0)[:keep_n]
    Z, V = Z[sel], V[sel]

    R = residual(Z, V)
    rn = np.linalg.norm(R, axis=1)
    lam = np.full(len(Z), 1e-10)
    active = np.isfinite(rn)
    nparam = 2 * n - 1

    for _ in range(max_iter):
        act = np.flatnonzero(active & (rn > residual_tol))
        if act.size == 0:
            break
        Za, Va, Ra = Z[act], V[act], R[act]
        Tb = _tangent_basis(Va)
        J = np.empty((act.size, n + 1, nparam))
        for a in range(n):
            e = np.zeros(n)
            e[a] = fd_step
            J[:, :, a] = (residual(Za + e, Va) - residual(Za - e, Va)) / (2 * fd_step)
        for s in range(n - 1):
            dv = Tb[:, :, s] * fd_step
            Vp = Va + dv
            Vp /= np.linalg.norm(Vp, axis=1, keepdims=True)
            Vm = Va - dv
            Vm /= np.linalg.norm(Vm, axis=1, keepdims=True)
            J[:, :, n + s] = (residual(Za, Vp) - residual(Za, Vm)) / (2 * fd_step)
        JtJ = np.einsum("kia,kib->kab", J, J)
        Jtr = np.einsum("kia,ki->ka", J, Ra)
        A = JtJ + lam[act][:, None, None] * np.eye(nparam)[None]
        try:
            delta = np.linalg.solve(A, -Jtr[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            A = A + 1e-8 * np.eye(nparam)[None]
            delta = np.linalg.solve(A, -Jtr[:, :, None])[:, :, 0]
        Zt = Za + delta[:, :n]
        Vt = Va + np.einsum("bas,bs->ba", Tb, delta[:, n:])
        Vt /= np.linalg.norm(Vt, axis=1, keepdims=True)
        Rt = residual(Zt, Vt)
        rt = np.linalg.norm(Rt, axis=1)
        better = np.isfinite(rt) & (rt < rn[act])
        idx_b = act[better]
        Z[idx_b], V[idx_b], R[idx_b], rn[idx_b] = (
            Zt[better], Vt[better], Rt[better], rt[better])
        lam[idx_b] = np.maximum(lam[idx_b] * 0.3, 1e-12)
        idx_w = act[~better]
        lam[idx_w] *= 30.0
        # abandon rows that left the region or stalled (damping blew up)
        off = np.linalg.norm(Z, axis=1) > 2.0 * k + 1.0
        active &= ~off
        active &= lam < 1e3

    keep = np.flatnonzero(active & (rn <= residual_tol)
                          & (np.linalg.norm(Z, axis=1) <= k + 1e-9))
    order = keep[np.argsort(rn[keep])]
    points: list[OmegaPoint] = []
    for i in order:
        v = _sign_normalize(V[i])
        cand = np.concatenate([Z[i], v])
        dup = False
        for q in points:
            if np.linalg.norm(cand - np.concatenate([q.z, q.v])) <= dedupe_tol:
                dup = True
                break
        if dup:
            continue
        g = terminal.grad(Z[i])
        _, DH, _, _ = model.derivatives(g)
        points.append(OmegaPoint(
            z=Z[i].copy(), v=v, residual=float(rn[i]),
            conjugate_image=Z[i] - T * DH,
        ))
    points.sort(key=lambda p: tuple(np.round(p.z, 12)))
    return points


def _omega_solve_1d(model, terminal, T, k, residual_tol, grid: int = 4001):
    zg = np.linspace(-k, k, grid)[:, None]
    _, g1, H2 = _terminal_batch(terminal, zg, 2)
    _, _, D2H, _ = model.derivatives_batch(g1)
    xz = 1.0 - T * D2H[:, 0, 0] * H2[:, 0, 0]

    def xz_of(z):
        cf = closed_forms(model, terminal, T, np.array([z]))
        return float(cf.x_z[0, 0])

    roots: list[float] = []
    for i in range(grid - 1):
        a, b = zg[i, 0], zg[i + 1, 0]
        fa, fb = xz[i], xz[i + 1]
        if fa == 0.0:
            roots.append(a)
        elif fa * fb < 0:
            for _ in range(200):
                mz = 0.5 * (a + b)
                fm = xz_of(mz)
                if abs(fm) <= 1e-15 or (b - a) < 1e-15:
                    break
                if fa * fm < 0:
                    b, fb = mz, fm
                else:
                    a, fa = mz, fm
            roots.append(0.5 * (a + b))
    if xz[-1] == 0.0:
        roots.append(zg[-1, 0])
    # sign-definite minima of |xz| (degenerate double zeros)
    absxz = np.abs(xz)
    for i in range(1, grid - 1):
        if absxz[i] <= absxz[i - 1] and absxz[i] <= absxz[i + 1] and absxz[i] < 1e-3:
            a, b = zg[i - 1, 0], zg[i + 1, 0]
            lo, hi = a, b
            for _ in range(200):
                m1 = lo + (hi - lo) / 3
                m2 = hi - (hi - lo) / 3
                if abs(xz_of(m1)) < abs(xz_of(m2)):
                    hi = m2
                else:
                    lo = m1
                if hi - lo < 1e-14:
                    break
            roots.append(0.5 * (lo + hi))
    points = []
    for z0 in roots:
        z = np.array([z0])
        v = np.array([1.0])
        r = phi(model, terminal, T, z, v)
        res = float(np.linalg.norm(r))
        if res > residual_tol:
            continue
        if any(abs(z0 - p.z[0]) < 1e-6 for p in points):
            continue
        g = terminal.grad(z)
        _, DH, _, _ = model.derivatives(g)
        points.append(OmegaPoint(z=z, v=v, residual=res, conjugate_image=z - T * DH))
    points.sort(key=lambda p: p.z[0])
    return points


def transversality_check(model: HamiltonianModel, terminal: TerminalCost4, T: float,
                         point: OmegaPoint, fd_step: float = 1e-4,
                         rtol: float = 1e-6) -> OmegaPoint:
    """Classify a zero by the numerical rank of the restricted Jacobian.

    Builds the (n+1) x (2n-1) Jacobian of phi on R^n x T_v S^{n-1} by
    fourth-order central differences (sphere directions retracted by
    normalization).  Transversal iff the (n+1)-th singular value exceeds
    rtol times the largest; then the zero set is locally a manifold of
    dimension n - 2.
    """
    n = point.z.size
    nparam = 2 * n - 1
    z, v = point.z, point.v

    def phi_at(zz, vv):
        return phi(model, terminal, T, zz, vv / np.linalg.norm(vv))

    cols = []
    for a in range(n):
        e = np.zeros(n)
        e[a] = fd_step
        cols.append((-phi_at(z + 2 * e, v) + 8 * phi_at(z + e, v)
                     - 8 * phi_at(z - e, v) + phi_at(z - 2 * e, v)) / (12 * fd_step))
    if n >= 2:
        Tb = _tangent_basis(v[None, :])[0]
        for s in range(n - 1):
            dv = Tb[:, s] * fd_step
            cols.append((-phi_at(z, v + 2 * dv) + 8 * phi_at(z, v + dv)
                         - 8 * phi_at(z, v - dv) + phi_at(z, v - 2 * dv)) / (12 * fd_step))
    J = np.column_stack(cols)
    svals = np.linalg.svd(J, compute_uv=False)
    padded = np.zeros(n + 1)
    padded[: svals.size] = svals
    transversal = bool(nparam >= n + 1 and padded[n] > rtol * padded[0])
    return replace(point, jacobian_singvals=padded, transversal=transversal)


def perturb_psi(terminal: TerminalCost4, params: PerturbationParams) -> TerminalCost4:
    """Localized quadratic + cubic perturbation of the terminal cost."""
    return perturbed_cost(terminal, params)


def trace_zero_sets(model: HamiltonianModel, terminal: TerminalCost4, T: float,
                    points: Sequence[OmegaPoint], box_radius: float,
                    step: float = 0.02, max_points: int = 4000,
                    residual_tol: float = 1e-9, fd_step: float = 1e-6) -> list[OmegaPoint]:
    """Sample the zero set densely by pseudo-arclength continuation.

    From each transversal zero, follows the one-dimensional nullspace of the
    restricted Jacobian in both directions with a predictor step of length
    ``step`` and Gauss-Newton correction, until the ball of ``box_radius`` is
    left, a loop closes, or the budget is exhausted.  Useful when the zero
    set has positive dimension (n >= 3) and isolated solver hits undersample
    it; for n = 2 the nullspace is trivial and the input is returned as is.

    Returns the input points plus traced samples (deduplicated at step/2).
    """
    n = model.m
    if n < 3 or not points:
        return list(points)
    k = float(box_radius)
    nparam = 2 * n - 1

    def residual(z, v):
        return phi(model, terminal, T, z, v)

    def jac(z, v, Tb):
        J = np.empty((n + 1, nparam))
        for a in range(n):
            e = np.zeros(n)
            e[a] = fd_step
            J[:, a] = (residual(z + e, v) - residual(z - e, v)) / (2 * fd_step)
        for s in range(n - 1):
            dv = Tb[:, s] * fd_step
            vp = (v + dv) / np.linalg.norm(v + dv)
            vm = (v - dv) / np.linalg.norm(v - dv)
            J[:, n + s] = (residual(z, vp) - residual(z, vm)) / (2 * fd_step)
        return J

    def correct(z, v):
        for _ in range(30):
            r = residual(z, v)
            rn = float(np.linalg.norm(r))
            if rn <= residual_tol:
                return z, v, rn
            Tb = _tangent_basis(v[None, :])[0]
            J = jac(z, v, Tb)
            delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
            z = z + delta[:n]
            v = v + Tb @ delta[n:]
            v /= np.linalg.norm(v)
        return z, v, float(np.linalg.norm(residual(z, v)))

    collected: list[OmegaPoint] = list(points)

    def add_point(z, v, rn):
        g = terminal.grad(z)
        _, DH, _, _ = model.derivatives(g)
        collected.append(OmegaPoint(
            z=z.copy(), v=_sign_normalize(v), residual=rn,
            conjugate_image=z - T * DH))

    budget = max_points
    for p in points:
        for direction in (+1.0, -1.0):
            z, v = p.z.copy(), p.v.copy()
            prev_t = None
            for _ in range(max_points):
                if budget <= 0:
                    break
                Tb = _tangent_basis(v[None, :])[0]
                J = jac(z, v, Tb)
                _, _, vt = np.linalg.svd(J)
                t = vt[-1]  # nullspace direction in (z, tangent) coordinates
                if prev_t is not None and t @ prev_t < 0:
                    t = -t
                elif prev_t is None:
                    t = direction * t
                prev_t = t
                z_pred = z + step * t[:n]
                v_pred = v + Tb @ (step * t[n:])
                v_pred /= np.linalg.norm(v_pred)
                z_new, v_new, rn = correct(z_pred, v_pred)
                if rn > residual_tol or np.linalg.norm(z_new) > k:
                    break
                if np.linalg.norm(z_new - p.z) < 0.5 * step and _sign_normalize(v_new) @ p.v > 0.999:
                    break  # closed a loop
                add_point(z_new, v_new, rn)
                budget -= 1
                z, v = z_new, v_new
            if budget <= 0:
                break
        if budget <= 0:
            break
    # thin out near-duplicates
    out: list[OmegaPoint] = []
    for q in collected:
        key = np.concatenate([q.z, q.v])
        if any(np.linalg.norm(key - np.concatenate([r.z, r.v])) < 0.4 * step for r in out):
            continue
        out.append(q)
    return out


@dataclass(frozen=True)
class TrialRecord:
    index: int
    n_zeros: int
    n_nontransversal: int
    all_transversal: bool


@dataclass(frozen=True)
class GenericityReport:
    anchors: np.ndarray
    base_zeros: int
    base_nontransversal: int
    trials: tuple[TrialRecord, ...]
    fraction_restored: float
    control_persists: bool


def genericity_experiment(model: HamiltonianModel, terminal: TerminalCost4, T: float,
                          box_radius: float, trials: int = 100,
                          magnitude: float = 1e-2, seed: int = 0,
                          anchors=None, omega_kwargs: dict | None = None,
                          executor=None) -> GenericityReport:
    """Random localized perturbations against a degenerate terminal cost.

    Runs the zero finder on the base cost, anchors perturbations at the
    non-transversal zeros found (or at explicit ``anchors``), then redoes the
    zero finding + transversality classification for ``trials`` random draws
    with coefficients uniform in [-magnitude, magnitude].  A trial counts as
    restored when every zero it finds is transversal (vacuously true when no
    zeros remain).  The theta = 0 control trial is run separately and must
    retain the degeneracy.
    """
    kw = dict(omega_kwargs or {})
    base_pts = [transversality_check(model, terminal, T, p)
                for p in omega_solve(model, terminal, T, box_radius, **kw)]
    bad = [p for p in base_pts if not p.transversal]
    if anchors is None:
        if not bad:
            raise ValueError("base cost has no non-transversal zeros; "
                             "pass anchors explicitly to perturb anyway")
        seen: list[np.ndarray] = []
        for p in bad:
            if not any(np.linalg.norm(p.z - s) < 1e-6 for s in seen):
                seen.append(p.z)
        anchors = np.array(seen)
    else:
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    n = anchors.shape[1]
    n_anchor = anchors.shape[0]

    rng = np.random.default_rng(seed)
    thetas = rng.uniform(-magnitude, magnitude, size=(trials, n_anchor, n * n + n))

    def run_one(idx: int) -> TrialRecord:
        th = thetas[idx]
        params = PerturbationParams(
            anchors=anchors,
            quad=th[:, : n * n].reshape(n_anchor, n, n),
            cubic=th[:, n * n:],
        )
        psi_t = perturb_psi(terminal, params)
        pts = [transversality_check(model, psi_t, T, p)
               for p in omega_solve(model, psi_t, T, box_radius, **kw)]
        bad_t = sum(1 for p in pts if not p.transversal)
        return TrialRecord(index=idx, n_zeros=len(pts), n_nontransversal=bad_t,
                           all_transversal=bad_t == 0)

    if executor is not None:
        records = list(executor.map(run_one, range(trials)))
    else:
        records = [run_one(i) for i in range(trials)]

    psi_ctrl = perturb_psi(terminal, PerturbationParams.zeros(anchors))
    ctrl_pts = [transversality_check(model, psi_ctrl, T, p)
                for p in omega_solve(model, psi_ctrl, T, box_radius, **kw)]
    control_persists = any(not p.transversal for p in ctrl_pts)

    frac = sum(1 for r in records if r.all_transversal) / max(trials, 1)
    return GenericityReport(
        anchors=anchors, base_zeros=len(base_pts), base_nontransversal=len(bad),
        trials=tuple(records), fraction_restored=frac,
        control_persists=control_persists,
    )


@dataclass(frozen=True)
class BoxCountReport:
    epsilons: tuple[float, ...]
    counts: tuple[int, ...]
    slope: float | None

    def saturated(self) -> bool:
        return len(self.counts) >= 2 and self.counts[-1] == self.counts[-2]


def conjugate_image_boxcount(points: Sequence[OmegaPoint], epsilons) -> BoxCountReport:
    """Occupied epsilon-box counts of the conjugate-image point set.

    The log-log slope of N against 1/epsilon estimates the box-counting
    dimension; a finite point set saturates as epsilon shrinks.
    """
    eps = tuple(float(e) for e in epsilons)
    images = np.array([p.conjugate_image for p in points]) if points else np.empty((0, 1))
    counts = []
    for e in eps:
        if len(images) == 0:
            counts.append(0)
            continue
        boxes = {tuple(idx) for idx in np.floor(images / e).astype(np.int64)}
        counts.append(len(boxes))
    slope = None
    pos = [(e, c) for e, c in zip(eps, counts) if c > 0]
    if len(pos) >= 2:
        xs = np.log([1.0 / e for e, _ in pos])
        ys = np.log([c for _, c in pos])
        slope = float(np.polyfit(xs, ys, 1)[0])
    return BoxCountReport(epsilons=eps, counts=tuple(counts), slope=slope)
