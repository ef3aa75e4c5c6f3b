"""Independent verification by direct cost evaluation of replayed controls.

For a base point zbar, the probe cost

    g(z, zbar) = integral of L along the replay + psi at its endpoint,

where the replay starts at x(0, zbar) but applies the control t -> u(t, z) of
the extremal ending at z.  Everything here uses only the extremal solver and
quadrature: no variational integrator enters, so agreement between the
finite-difference derivatives of g and the sensitivity-based quantities is an
end-to-end independent check.

Along a kernel direction v of x_z(0, zbar), theta -> g(zbar + theta v, zbar)
has vanishing first and second derivatives at 0, and its third derivative
equals -kappa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from conjpt import _backend, _purekernels
from conjpt.conjugate import ConjugateCandidate, necessary_condition
from conjpt.errors import NonFiniteTrajectoryError
from conjpt.pontryagin import ExtremalTrajectory, simpson, solve_extremal
from conjpt.problem import ProblemSpec

__all__ = ["ReplayResult", "replay_cost", "cost_derivatives", "check_candidate",
           "CostProbe", "CandidateCheck"]


@dataclass(frozen=True)
class ReplayResult:
    """Replay of the control u(., z) from the initial point of the zbar extremal."""

    z: np.ndarray
    zbar: np.ndarray
    times: np.ndarray
    x_tilde: np.ndarray  # (N+1, n)
    cost: float


def _replay_arrays(spec: ProblemSpec, traj_z: ExtremalTrajectory, x0, backend: str):
    n, m, N = spec.n, spec.m, traj_z.steps
    if backend == "compiled":
        from conjpt import _kernels

        t = spec.kernel_tapes
        xt = np.empty((N + 1, n))
        lvals = np.empty(N + 1)
        err = _kernels.replay_sweep(
            n, m,
            t.f_low.code, t.f_low.consts, t.f_low.outputs, t.f_low.n_slots,
            t.L_low.code, t.L_low.consts, t.L_low.outputs, t.L_low.n_slots,
            traj_z.u, traj_z.udot, np.asarray(x0, dtype=float),
            float(spec.horizon), N, xt, lvals,
        )
        if err:
            raise NonFiniteTrajectoryError("replay trajectory blew up")
        return xt, lvals
    return _purekernels.replay_sweep(
        spec.bundles, n, m, traj_z.u, traj_z.udot, x0, spec.horizon, N)


def replay_cost(spec: ProblemSpec, z, zbar, steps: int = 400,
                backend: str | None = None) -> ReplayResult:
    """Cost of the trajectory that starts at x(0, zbar) but replays u(., z).

    Both extremals are solved on the same grid; the replay integrates forward
    with the frozen Hermite-interpolated control and the cost uses composite
    Simpson quadrature on that grid.
    """
    z = np.asarray(z, dtype=float)
    zbar = np.asarray(zbar, dtype=float)
    traj_z = solve_extremal(spec, z, steps=steps, backend=backend)
    if np.array_equal(z, zbar):
        x0 = traj_z.x[0]
    else:
        x0 = solve_extremal(spec, zbar, steps=steps, backend=backend).x[0]
    return _replay_from(spec, traj_z, zbar, x0)


def _replay_from(spec: ProblemSpec, traj_z: ExtremalTrajectory, zbar, x0) -> ReplayResult:
    chosen = _backend.resolve_backend(traj_z.backend, spec.kernel_tapes is not None)
    xt, lvals = _replay_arrays(spec, traj_z, x0, chosen)
    dt = spec.horizon / traj_z.steps
    cost = simpson(lvals, dt) + spec.terminal.value(xt[-1])
    return ReplayResult(z=traj_z.z, zbar=np.asarray(zbar, dtype=float),
                        times=traj_z.times, x_tilde=xt, cost=cost)


@dataclass(frozen=True)
class CostProbe:
    """Finite-difference derivatives of theta -> g(zbar + theta v, zbar)."""

    zbar: np.ndarray
    v: np.ndarray
    h: float
    value: float  # g at theta = 0
    d1: float
    d2: float
    d3: float
    samples: dict  # theta -> g


def cost_derivatives(spec: ProblemSpec, zbar, v, h: float = 1e-2,
                     steps: int = 400, backend: str | None = None,
                     richardson: bool = True) -> CostProbe:
    """Central-difference derivatives of the probe cost along v.

    Stencils: d1 = (g(h) - g(-h)) / 2h, d2 = (g(h) - 2 g(0) + g(-h)) / h^2,
    d3 = (-g(-2h) + 2 g(-h) - 2 g(h) + g(2h)) / 2h^3, each Richardson-
    extrapolated over h and h/2 (one halving) unless disabled.
    """
    zbar = np.asarray(zbar, dtype=float)
    v = np.asarray(v, dtype=float)
    base = solve_extremal(spec, zbar, steps=steps, backend=backend)
    x0 = base.x[0]

    thetas = [0.0, h, -h, 2 * h, -2 * h]
    if richardson:
        thetas += [0.5 * h, -0.5 * h]
    g = {}
    for th in thetas:
        if th == 0.0:
            traj = base
        else:
            traj = solve_extremal(spec, zbar + th * v, steps=steps, backend=backend)
        g[th] = _replay_from(spec, traj, zbar, x0).cost

    def d1_at(s):
        return (g[s] - g[-s]) / (2 * s)

    def d2_at(s):
        return (g[s] - 2 * g[0.0] + g[-s]) / (s * s)

    def d3_at(s):
        return (-g[-2 * s] + 2 * g[-s] - 2 * g[s] + g[2 * s]) / (2 * s**3)

    if richardson:
        d1 = (4 * d1_at(0.5 * h) - d1_at(h)) / 3
        d2 = (4 * d2_at(0.5 * h) - d2_at(h)) / 3
        d3 = (4 * d3_at(0.5 * h) - d3_at(h)) / 3
    else:
        d1, d2, d3 = d1_at(h), d2_at(h), d3_at(h)
    return CostProbe(zbar=zbar, v=v, h=h, value=g[0.0], d1=d1, d2=d2, d3=d3,
                     samples=g)


@dataclass(frozen=True)
class CandidateCheck:
    """Derivative identities at a conjugate-point candidate.

    Passing requires |d1| and |d2| below tol_low and |d3 + kappa| below
    tol_third; kappa comes from the sensitivity path, d1..d3 from replays, so
    the test couples the two independent computations end to end.
    """

    d1: float
    d2: float
    d3: float
    kappa: float
    tol_low: float
    tol_third: float
    passed: bool
    probe: CostProbe


def check_candidate(spec: ProblemSpec, candidate: ConjugateCandidate,
                    h: float = 1e-2, steps: int = 400,
                    backend: str | None = None) -> CandidateCheck:
    probe = cost_derivatives(spec, candidate.z, candidate.v, h=h, steps=steps,
                             backend=backend)
    kappa = candidate.kappa
    if kappa is None:
        kappa = necessary_condition(spec, candidate, steps=steps, backend=backend)
    tol_low = 1e-5 * (1.0 + abs(probe.value))
    tol_third = max(1e-3, 1e-3 * abs(kappa))
    passed = (abs(probe.d1) <= tol_low and abs(probe.d2) <= tol_low
              and abs(probe.d3 + kappa) <= tol_third)
    return CandidateCheck(d1=probe.d1, d2=probe.d2, d3=probe.d3, kappa=kappa,
                          tol_low=tol_low, tol_third=tol_third, passed=passed,
                          probe=probe)
