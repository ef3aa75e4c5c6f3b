"""Extremal trajectories and their sensitivities with respect to the terminal point.

An extremal solves

    xdot = f(x, u(x, p)),   pdot = -p f_x(x, u) - L_x(x, u)

backward from x(T) = z, p(T) = grad psi(z), with u(x, p) the unique pointwise
minimizer of L(x, w) + p . f(x, w) over w.  Costates are row covectors: p B
means row-vector-times-matrix throughout.

The variational pass integrates, along a stored extremal, the matrix systems
for x_z and p_z (terminal data I and D2 psi(z)) and optionally the directional
second-order pair x_zz(v x v), p_zz(v x v) (terminal data 0 and
D3 psi(z)(v x v)), together with the auxiliary forward system
wdot = f_x w, w(0) = -x_zz(0, z)(v x v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conjpt import _backend, _purekernels
from conjpt.errors import ControlSolveError, NonFiniteTrajectoryError
from conjpt.problem import ProblemSpec

__all__ = [
    "ExtremalTrajectory",
    "SensitivityBundle",
    "minimize_hamiltonian",
    "control_jacobians",
    "solve_extremal",
    "solve_variational",
    "simpson",
]


def simpson(values: np.ndarray, dt: float) -> float:
    """Composite Simpson quadrature on a uniform grid (even cell count)."""
    n = len(values) - 1
    if n % 2 != 0:
        raise ValueError("Simpson quadrature needs an even number of cells")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float(dt / 3.0 * (w @ values))


@dataclass(frozen=True)
class ExtremalTrajectory:
    """Grid-sampled solution of the backward Pontryagin system.

    ``times`` is the ascending uniform grid 0 = t_0 < ... < t_N = T with
    x[N] = z and p[N] = grad psi(z) exact.  ``gamma`` holds the running-cost
    samples L(x(t_j), u(t_j)); ``cost`` is their Simpson integral plus psi(z).
    The time derivatives at the nodes are stored for Hermite interpolation.
    """

    spec: ProblemSpec
    z: np.ndarray
    times: np.ndarray
    x: np.ndarray  # (N+1, n)
    p: np.ndarray  # (N+1, n)
    u: np.ndarray  # (N+1, m)
    gamma: np.ndarray  # (N+1,)
    xdot: np.ndarray
    pdot: np.ndarray
    udot: np.ndarray
    cost: float
    backend: str

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def stationarity_residual(self) -> float:
        """max_j |p f_u + L_u| at the grid nodes."""
        worst = 0.0
        for j in range(len(self.times)):
            fl = self.spec.bundles.f_low(self.x[j])
            ll = self.spec.bundles.L_low(self.x[j], self.u[j])
            r = ll.L_u + fl.f_val[1:] @ self.p[j]
            worst = max(worst, float(np.max(np.abs(r))))
        return worst


@dataclass(frozen=True)
class SensitivityBundle:
    """First- and optional second-order sensitivities along an extremal.

    x_z[j], p_z[j] are the n x n Jacobians of x(t_j, .), p(t_j, .) at z;
    u_z[j] is m x n.  When a direction v is set, xzz_vv and uzz_vv hold the
    directional second derivatives contracted with v x v, and w solves the
    forward linear system with w(0) = -xzz_vv(0).
    """

    base: ExtremalTrajectory
    x_z: np.ndarray  # (N+1, n, n)
    p_z: np.ndarray
    u_z: np.ndarray  # (N+1, m, n)
    direction: np.ndarray | None = None
    xzz_vv: np.ndarray | None = None
    uzz_vv: np.ndarray | None = None
    pzz_vv: np.ndarray | None = None
    w: np.ndarray | None = None


def minimize_hamiltonian(spec: ProblemSpec, x, p, guess=None,
                         tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """The unique control with p . f_u(x, u) + L_u(x, u) = 0 (damped Newton)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    g = np.zeros(spec.m) if guess is None else np.asarray(guess, dtype=float)
    return _purekernels.newton_control(spec.bundles, x, p, g, tol, max_iter)


def control_jacobians(spec: ProblemSpec, x, p, u, x_z, p_z) -> np.ndarray:
    """u_z from the implicitly differentiated stationarity identity.

    Requires u to satisfy the stationarity equation at (x, p); with affine
    dynamics the system matrix reduces to L_uu.
    """
    fl = spec.bundles.f_low(np.asarray(x, dtype=float))
    ll = spec.bundles.L_low(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
    return _purekernels.control_first_order(
        fl.f_val, fl.f_jac, ll.L_uu, ll.L_xu, np.asarray(p, dtype=float),
        np.asarray(x_z, dtype=float), np.asarray(p_z, dtype=float))


def _resolve(spec: ProblemSpec, backend: str | None) -> str:
    return _backend.resolve_backend(backend, spec.kernel_tapes is not None)


def solve_extremal(spec: ProblemSpec, z, steps: int = 400, backend: str | None = None,
                   newton_tol: float = 1e-12) -> ExtremalTrajectory:
    """Solve the Pontryagin system backward from terminal point ``z``.

    Classical RK4 on a uniform grid of ``steps`` cells (even, >= 16); the
    control minimization is re-solved at every stage, warm-started from the
    previous stage.
    """
    steps = int(steps)
    if steps < 16:
        raise ValueError("steps must be >= 16")
    if steps % 2 != 0:
        raise ValueError("steps must be even (Simpson quadrature on the grid)")
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.n,):
        raise ValueError(f"z must have shape ({spec.n},)")
    pT = spec.terminal.grad(z)
    chosen = _resolve(spec, backend)
    if chosen == "compiled":
        x, p, u, xdot, pdot, udot, gamma = _compiled_extremal(spec, z, pT, steps, newton_tol)
    else:
        x, p, u, xdot, pdot, udot, gamma = _purekernels.extremal_sweep(
            spec.bundles, spec.n, spec.m, z, pT, spec.horizon, steps, newton_tol)
    times = np.linspace(0.0, spec.horizon, steps + 1)
    dt = spec.horizon / steps
    cost = simpson(gamma, dt) + spec.terminal.value(z)
    return ExtremalTrajectory(
        spec=spec, z=z, times=times, x=x, p=p, u=u, gamma=gamma,
        xdot=xdot, pdot=pdot, udot=udot, cost=cost, backend=chosen,
    )


def solve_variational(traj: ExtremalTrajectory, direction=None,
                      backend: str | None = None,
                      newton_tol: float = 1e-12) -> SensitivityBundle:
    """Integrate the sensitivity systems along a stored extremal.

    Runs backward with terminal data x_z(T) = I, p_z(T) = D2 psi(z); when a
    direction v is given also the directional second-order pair, then the
    forward auxiliary system for w.
    """
    spec = traj.spec
    n, m = spec.n, spec.m
    N = traj.steps
    v = None if direction is None else np.asarray(direction, dtype=float)
    D2 = spec.terminal.hess(traj.z)
    piT = None
    if v is not None:
        if v.shape != (n,):
            raise ValueError(f"direction must have shape ({n},)")
        piT = np.einsum("abc,b,c->a", spec.terminal.third(traj.z), v, v)
    arrays = (traj.x, traj.p, traj.u, traj.xdot, traj.pdot, traj.udot)
    chosen = _backend.resolve_backend(
        backend if backend is not None else traj.backend, spec.kernel_tapes is not None)
    if chosen == "compiled":
        out = _compiled_variational(spec, arrays, N, D2, v, piT, newton_tol)
    else:
        out = _purekernels.variational_sweep(
            spec.bundles, n, m, arrays, spec.horizon, N, np.eye(n), D2, v, piT,
            newton_tol)
    if v is None:
        Xz, Pz, Uz = out
        return SensitivityBundle(base=traj, x_z=Xz, p_z=Pz, u_z=Uz)
    Xz, Pz, Uz, xi, pi, mu = out
    if chosen == "compiled":
        w = _compiled_w(spec, arrays, N, -xi[0], newton_tol)
    else:
        w = _purekernels.w_forward_sweep(
            spec.bundles, n, m, arrays, spec.horizon, N, -xi[0], newton_tol)
    return SensitivityBundle(
        base=traj, x_z=Xz, p_z=Pz, u_z=Uz, direction=v,
        xzz_vv=xi, uzz_vv=mu, pzz_vv=pi, w=w,
    )


# ---------------------------------------------------------------------------
# compiled dispatch

def _tapes(spec: ProblemSpec):
    t = spec.kernel_tapes
    if t is None:  # resolve_backend guarantees this does not happen
        raise RuntimeError("compiled backend without kernel tapes")
    return t


def _compiled_extremal(spec, z, pT, steps, tol):
    from conjpt import _kernels

    t = _tapes(spec)
    n, m, N = spec.n, spec.m, steps
    x = np.empty((N + 1, n))
    p = np.empty((N + 1, n))
    u = np.empty((N + 1, m))
    xdot = np.empty((N + 1, n))
    pdot = np.empty((N + 1, n))
    udot = np.empty((N + 1, m))
    gamma = np.empty(N + 1)
    err = _kernels.extremal_sweep(
        n, m,
        t.f_low.code, t.f_low.consts, t.f_low.outputs, t.f_low.n_slots,
        t.L_low.code, t.L_low.consts, t.L_low.outputs, t.L_low.n_slots,
        np.asarray(z, dtype=float), np.asarray(pT, dtype=float),
        float(spec.horizon), N, tol, 50,
        x, p, u, xdot, pdot, udot, gamma,
    )
    _raise_kernel(err)
    return x, p, u, xdot, pdot, udot, gamma


def _compiled_variational(spec, arrays, N, D2, v, piT, tol):
    from conjpt import _kernels

    t = _tapes(spec)
    n, m = spec.n, spec.m
    x, p, u, xdot, pdot, udot = arrays
    Xz = np.empty((N + 1, n, n))
    Pz = np.empty((N + 1, n, n))
    Uz = np.empty((N + 1, m, n))
    with_dir = v is not None
    xi = np.empty((N + 1, n))
    pi = np.empty((N + 1, n))
    mu = np.empty((N + 1, m))
    err = _kernels.variational_sweep(
        n, m,
        t.f_high.code, t.f_high.consts, t.f_high.outputs, t.f_high.n_slots,
        t.L_low.code, t.L_low.consts, t.L_low.outputs, t.L_low.n_slots,
        t.L_high.code, t.L_high.consts, t.L_high.outputs, t.L_high.n_slots,
        x, p, u, xdot, pdot, udot,
        float(spec.horizon), N,
        np.asarray(D2, dtype=float, order="C"),
        1 if with_dir else 0,
        np.zeros(n) if v is None else np.asarray(v, dtype=float),
        np.zeros(n) if piT is None else np.asarray(piT, dtype=float),
        tol, 50,
        Xz, Pz, Uz, xi, pi, mu,
    )
    _raise_kernel(err)
    if with_dir:
        return Xz, Pz, Uz, xi, pi, mu
    return Xz, Pz, Uz


def _compiled_w(spec, arrays, N, w0, tol):
    from conjpt import _kernels

    t = _tapes(spec)
    n, m = spec.n, spec.m
    x, p, u, xdot, pdot, udot = arrays
    w = np.empty((N + 1, n))
    err = _kernels.w_forward_sweep(
        n, m,
        t.f_low.code, t.f_low.consts, t.f_low.outputs, t.f_low.n_slots,
        x, u, xdot, udot, float(spec.horizon), N,
        np.asarray(w0, dtype=float), w,
    )
    _raise_kernel(err)
    return w


def _raise_kernel(err: int) -> None:
    if err == 0:
        return
    if err == 1:
        raise ControlSolveError("control Newton failed inside the compiled sweep")
    if err == 2:
        raise NonFiniteTrajectoryError("compiled sweep produced non-finite values")
    raise RuntimeError(f"compiled kernel returned unknown error code {err}")
