import numpy as np
import pytest

from conjpt import pontryagin as pt
from conjpt import problem as pb
from conjpt import replay as rp
from conjpt.calvar import HamiltonianModel, closed_forms
from conjpt.catalog import build


def _fd_jacobian_of_x0(spec, z, steps, h=1e-2):
    """4th-order central differences of z -> x(0, z) across re-solved extremals."""
    n = spec.n
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        f = lambda t: pt.solve_extremal(spec, z + t * e, steps=steps).x[0]
        out[:, j] = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
    return out


def test_minimize_hamiltonian_quadratic_cov(backend):
    spec = build("cov2d")
    p = np.array([0.7, -0.3])
    u = pt.minimize_hamiltonian(spec, np.zeros(2), p)
    np.testing.assert_allclose(u, -p, atol=1e-12)
    u0 = pt.minimize_hamiltonian(spec, np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(u0, 0.0, atol=1e-15)


def test_minimize_hamiltonian_quartic_against_bisection():
    spec = build("cov1d_quartic_control")
    u = pt.minimize_hamiltonian(spec, np.zeros(1), np.array([1.0]))
    # bisection oracle on u + u^3/3 + 1 = 0
    lo, hi = -2.0, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid + mid**3 / 3 + 1 > 0:
            hi = mid
        else:
            lo = mid
    root = 0.5 * (lo + hi)
    assert u[0] == pytest.approx(root, abs=1e-12)
    assert u[0] == pytest.approx(-0.817731, abs=1e-6)
    # stationarity residual at the solution
    assert abs(u[0] + u[0] ** 3 / 3 + 1.0) <= 1e-12


def test_extremal_linear_terminal_cost_straight_line(backend):
    # grad psi = c constant: u = -c, x(0, z) = z + T c
    spec = pb.cov_problem("(u1^2+u2^2)/2", "0.4*z1 - 1.1*z2", 1.0, 2)
    z = np.array([0.3, 0.8])
    traj = pt.solve_extremal(spec, z, steps=64, backend=backend)
    c = np.array([0.4, -1.1])
    np.testing.assert_allclose(traj.u, np.tile(-c, (65, 1)), atol=1e-13)
    np.testing.assert_allclose(traj.x[0], z + c, atol=1e-13)


def test_extremal_degenerate_horizon(backend):
    spec = pb.cov_problem("u1^2/2", "cos(z1)", 1e-8, 1)
    z = np.array([0.7])
    traj = pt.solve_extremal(spec, z, steps=16, backend=backend)
    assert abs(traj.x[0, 0] - z[0]) <= 1e-7


def test_extremal_terminal_conditions_exact(backend):
    spec = build("cov2d")
    z = np.array([0.4, -0.7])
    traj = pt.solve_extremal(spec, z, steps=100, backend=backend)
    assert np.array_equal(traj.x[-1], z)
    assert np.array_equal(traj.p[-1], spec.terminal.grad(z))
    assert traj.stationarity_residual() <= 1e-12


def test_extremal_matches_cov_closed_form(backend):
    spec = build("cov2d")
    model = HamiltonianModel.from_spec(spec)
    rng = np.random.default_rng(2)
    for _ in range(4):
        z = rng.uniform(-2, 2, 2)
        traj = pt.solve_extremal(spec, z, steps=400, backend=backend)
        cf = closed_forms(model, spec.terminal, spec.horizon, z)
        assert np.max(np.abs(traj.x[0] - cf.x0)) < 1e-8


def test_variational_terminal_conditions(backend):
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    v = np.array([0.6, 0.8])
    traj = pt.solve_extremal(spec, z, steps=64, backend=backend)
    bund = pt.solve_variational(traj, direction=v, backend=backend)
    np.testing.assert_array_equal(bund.x_z[-1], np.eye(2))
    np.testing.assert_array_equal(bund.p_z[-1], spec.terminal.hess(z))
    np.testing.assert_array_equal(bund.xzz_vv[-1], np.zeros(2))
    np.testing.assert_allclose(bund.w[0], -bund.xzz_vv[0], atol=0)


def test_variational_matches_cov_closed_form(backend):
    spec = build("cov2d")
    model = HamiltonianModel.from_spec(spec)
    z = np.array([0.4, -0.7])
    v = np.array([0.6, 0.8])
    traj = pt.solve_extremal(spec, z, steps=400, backend=backend)
    bund = pt.solve_variational(traj, direction=v, backend=backend)
    cf = closed_forms(model, spec.terminal, spec.horizon, z, v)
    assert np.max(np.abs(bund.x_z[0] - cf.x_z)) < 1e-8
    assert np.max(np.abs(bund.p_z[0] - cf.p_z)) < 1e-12
    assert np.max(np.abs(bund.xzz_vv[0] - cf.xzz_vv)) < 1e-8


def test_quadratic_terminal_cost_kills_second_order(backend):
    spec = build("cov2d_quadpsi")
    z = np.array([0.9, -1.4])
    traj = pt.solve_extremal(spec, z, steps=64, backend=backend)
    bund = pt.solve_variational(traj, direction=np.array([0.6, 0.8]),
                                backend=backend)
    assert np.max(np.abs(bund.xzz_vv)) < 1e-13


def test_sensitivities_match_fd_general(backend):
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    v = np.array([0.6, 0.8])
    steps = 200
    traj = pt.solve_extremal(spec, z, steps=steps, backend=backend)
    bund = pt.solve_variational(traj, direction=v, backend=backend)
    fd = _fd_jacobian_of_x0(spec, z, steps)
    assert np.max(np.abs(bund.x_z[0] - fd)) < 1e-5
    h = 1e-2
    f = lambda t: pt.solve_extremal(spec, z + t * v, steps=steps).x[0]
    fd2 = (-f(2 * h) + 16 * f(h) - 30 * f(0) + 16 * f(-h) - f(-2 * h)) / (12 * h * h)
    assert np.max(np.abs(bund.xzz_vv[0] - fd2)) < 1e-4


def test_second_order_costate_and_control_match_fd():
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    v = np.array([0.6, 0.8])
    steps = 400
    traj = pt.solve_extremal(spec, z, steps=steps)
    bund = pt.solve_variational(traj, direction=v)
    h = 1e-2

    def p0(t):
        return pt.solve_extremal(spec, z + t * v, steps=steps).p[0]

    def u0(t):
        return pt.solve_extremal(spec, z + t * v, steps=steps).u[0]

    fd_p = (-p0(2 * h) + 16 * p0(h) - 30 * p0(0) + 16 * p0(-h) - p0(-2 * h)) / (12 * h * h)
    fd_u = (-u0(2 * h) + 16 * u0(h) - 30 * u0(0) + 16 * u0(-h) - u0(-2 * h)) / (12 * h * h)
    assert np.max(np.abs(bund.pzz_vv[0] - fd_p)) < 1e-4
    assert np.max(np.abs(bund.uzz_vv[0] - fd_u)) < 1e-4


def test_control_jacobian_matches_fd(backend):
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    steps = 200
    traj = pt.solve_extremal(spec, z, steps=steps, backend=backend)
    bund = pt.solve_variational(traj, backend=backend)
    h = 1e-2
    fd = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1.0
        f = lambda t: pt.solve_extremal(spec, z + t * e, steps=steps).u[0]
        fd[:, j] = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h)
    assert np.max(np.abs(bund.u_z[0] - fd)) < 1e-5


def test_control_jacobians_cov_relation():
    # xdot = u, L = |u|^2 / 2: u = -p pointwise, so u_z = -p_z
    spec = build("cov2d")
    z = np.array([0.4, -0.7])
    traj = pt.solve_extremal(spec, z, steps=64)
    bund = pt.solve_variational(traj)
    np.testing.assert_allclose(bund.u_z, -bund.p_z, atol=1e-12)
    # zero sensitivities propagate to zero control sensitivity
    uz = pt.control_jacobians(spec, traj.x[0], traj.p[0], traj.u[0],
                              np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(uz, np.zeros((2, 2)))


def test_costate_pairing_identity(backend):
    # d/dt (p . x_z) = -Gamma_z: Simpson over cell pairs against the increment
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    steps = 200
    traj = pt.solve_extremal(spec, z, steps=steps, backend=backend)
    bund = pt.solve_variational(traj, backend=backend)
    N = traj.steps
    dt = spec.horizon / N
    pxz = np.einsum("ja,jab->jb", traj.p, bund.x_z)
    # Gamma_z = L_x x_z + L_u u_z at the nodes
    gz = np.empty((N + 1, spec.n))
    for j in range(N + 1):
        ll = spec.bundles.L_low(traj.x[j], traj.u[j])
        gz[j] = ll.L_x @ bund.x_z[j] + ll.L_u @ bund.u_z[j]
    worst = 0.0
    for j in range(0, N - 1, 2):
        inc = pxz[j + 2] - pxz[j]
        quad = dt / 3.0 * (gz[j] + 4 * gz[j + 1] + gz[j + 2])
        worst = max(worst, float(np.max(np.abs(inc + quad))))
    assert worst <= 1e-6


def test_cov_integration_is_exact_at_any_step_count(backend):
    # constant costate and control make the trig CoV problem exactly
    # integrable by RK4: no truncation error to refine away
    spec = build("cov2d")
    model = HamiltonianModel.from_spec(spec)
    z = np.array([1.1, 0.3])
    v = np.array([-0.8, 0.6])
    cf = closed_forms(model, spec.terminal, spec.horizon, z, v)
    for N in (100, 800):
        traj = pt.solve_extremal(spec, z, steps=N, backend=backend)
        bund = pt.solve_variational(traj, direction=v, backend=backend)
        assert np.max(np.abs(traj.x[0] - cf.x0)) < 1e-12
        assert np.max(np.abs(bund.x_z[0] - cf.x_z)) < 1e-12
        assert np.max(np.abs(bund.xzz_vv[0] - cf.xzz_vv)) < 1e-12


def test_convergence_order_dyadic(backend):
    # genuine truncation requires state-dependent dynamics; reference from a
    # much finer grid of the same integrator
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    v = np.array([0.6, 0.8])
    ref_t = pt.solve_extremal(spec, z, steps=3200, backend=backend)
    ref_b = pt.solve_variational(ref_t, direction=v, backend=backend)
    errs = []
    for N in (100, 200, 400, 800):
        traj = pt.solve_extremal(spec, z, steps=N, backend=backend)
        bund = pt.solve_variational(traj, direction=v, backend=backend)
        errs.append(max(
            np.max(np.abs(traj.x[0] - ref_t.x[0])),
            np.max(np.abs(bund.x_z[0] - ref_b.x_z[0])),
            np.max(np.abs(bund.xzz_vv[0] - ref_b.xzz_vv[0])),
        ))
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]
    assert min(orders) >= 3.5, (errs, orders)


def test_w_relation_against_replay_differences(backend):
    # xtilde_zz(v x v) = x_zz(v x v) + w at t in {0, T/2, T}, for a kernel
    # direction v of x_z(0, zbar).  On the 2D trig problem the singular set is
    # known in closed form: z = (0.5, asin(F) - 0.5) with
    # sin(z1 + z2) = 2 (1 - cos z1) / (2 - cos z1) + ... solved numerically here.
    spec = build("cov2d")
    steps = 400

    def det_of(z2):
        s = 0.5 * np.sin(0.5 + z2)
        return (1 - np.cos(0.5)) * (1 - s) - s

    lo, hi = -0.5, 0.2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if det_of(lo) * det_of(mid) < 0:
            hi = mid
        else:
            lo = mid
    z = np.array([0.5, 0.5 * (lo + hi)])
    traj = pt.solve_extremal(spec, z, steps=steps, backend=backend)
    bundp = pt.solve_variational(traj, backend=backend)
    _, svals, vt = np.linalg.svd(bundp.x_z[0])
    assert svals[-1] < 1e-8  # genuine kernel
    v = vt[-1]
    bund = pt.solve_variational(traj, direction=v, backend=backend)
    h = 1e-2
    x0 = traj.x[0]

    def replay_x(theta):
        tr = pt.solve_extremal(spec, z + theta * v, steps=steps, backend=backend)
        res = rp._replay_from(spec, tr, z, x0)
        return res.x_tilde

    xm, x0r, xp = replay_x(-h), replay_x(0.0), replay_x(h)
    fd2 = (xp - 2 * x0r + xm) / (h * h)
    N = traj.steps
    for j in (0, N // 2, N):
        pred = bund.xzz_vv[j] + bund.w[j]
        assert np.max(np.abs(fd2[j] - pred)) < 1e-4, j


@pytest.mark.skipif(len(__import__("conjpt").available_backends()) < 2,
                    reason="compiled backend not built")
def test_backends_agree_bitwise_close():
    spec = build("affine2d")
    z = np.array([0.5, -0.3])
    v = np.array([0.6, 0.8])
    out = {}
    for be in ("python", "compiled"):
        traj = pt.solve_extremal(spec, z, steps=100, backend=be)
        bund = pt.solve_variational(traj, direction=v, backend=be)
        out[be] = (traj, bund)
    tp, bp = out["python"]
    tc, bc = out["compiled"]
    assert np.max(np.abs(tp.x - tc.x)) < 1e-13
    assert np.max(np.abs(bp.x_z - bc.x_z)) < 1e-12
    assert np.max(np.abs(bp.xzz_vv - bc.xzz_vv)) < 1e-12
    assert np.max(np.abs(bp.w - bc.w)) < 1e-12


def test_step_validation():
    spec = build("bench1d")
    with pytest.raises(ValueError):
        pt.solve_extremal(spec, np.array([0.0]), steps=8)
    with pytest.raises(ValueError):
        pt.solve_extremal(spec, np.array([0.0]), steps=101)


def test_blowup_raises(backend):
    from conjpt.errors import NonFiniteTrajectoryError

    # xdot = -x^3 backward in time explodes in finite time for large z
    spec = pb.control_affine_problem(
        f0=["-(x1^3)"], f_list=[["1"]], L="u1^2/2", psi="0*z1", T=1.0, n=1, m=1)
    with pytest.raises(NonFiniteTrajectoryError):
        pt.solve_extremal(spec, np.array([40.0]), steps=64, backend=backend)


def test_control_solve_failure_raises(backend):
    from conjpt.errors import ControlSolveError

    # L = u^4: L_uu(0) = 0, the Newton start is singular away from p = 0
    spec = pb.cov_problem(
        pb.RunningCost3.from_expr("u1^4", 1, 1, convexity_modulus=1e-8),
        "z1^2/2", 1.0, 1)
    with pytest.raises(ControlSolveError):
        pt.solve_extremal(spec, np.array([3.0]), steps=16, backend=backend)


@pytest.mark.skipif(len(__import__("conjpt").available_backends()) < 2,
                    reason="compiled backend not built")
def test_backend_parity_rectangular_dimensions():
    # single control field on a 2D state and a 3-state/2-control system:
    # exercises every m != n loop bound in the compiled kernels
    specs = [
        pb.control_affine_problem(
            f0=["x2", "-x1 + 0.1*x2^2"], f_list=[["1", "0.5"]],
            L="u1^2/2 + 0.05*(x1^2 + x2^2)",
            psi="cos(z1) + 0.3*z2^2", T=1.0, n=2, m=1),
        pb.control_affine_problem(
            f0=["x2", "-sin(x1)", "0.2*x1"],
            f_list=[["1", "0", "0"], ["0", "1", "0.3"]],
            L="(u1^2+u2^2)/2 + 0.1*x3^2 + 0.02*x1*u1",
            psi="cos(z1) + 0.5*sin(z2+z3) + 0.1*z1*z3", T=1.0, n=3, m=2),
    ]
    rng = np.random.default_rng(9)
    for spec in specs:
        z = rng.uniform(-0.8, 0.8, spec.n)
        v = rng.standard_normal(spec.n)
        v /= np.linalg.norm(v)
        res = {}
        for be in ("python", "compiled"):
            traj = pt.solve_extremal(spec, z, steps=64, backend=be)
            bund = pt.solve_variational(traj, direction=v, backend=be)
            res[be] = (traj, bund)
        tp, bp = res["python"]
        tc, bc = res["compiled"]
        assert np.max(np.abs(tp.x - tc.x)) < 1e-13
        assert np.max(np.abs(tp.u - tc.u)) < 1e-13
        assert np.max(np.abs(bp.x_z - bc.x_z)) < 1e-12
        assert np.max(np.abs(bp.p_z - bc.p_z)) < 1e-12
        assert np.max(np.abs(bp.u_z - bc.u_z)) < 1e-12
        assert np.max(np.abs(bp.xzz_vv - bc.xzz_vv)) < 1e-12
        assert np.max(np.abs(bp.pzz_vv - bc.pzz_vv)) < 1e-12
        assert np.max(np.abs(bp.uzz_vv - bc.uzz_vv)) < 1e-12
        assert np.max(np.abs(bp.w - bc.w)) < 1e-12
        # and the sensitivities are right, not merely equal: FD spot check
        h = 1e-3
        fd2 = (pt.solve_extremal(spec, z + h * v, steps=256).x[0]
               - 2 * pt.solve_extremal(spec, z, steps=256).x[0]
               + pt.solve_extremal(spec, z - h * v, steps=256).x[0]) / (h * h)
        bund256 = pt.solve_variational(pt.solve_extremal(spec, z, steps=256),
                                       direction=v)
        assert np.max(np.abs(bund256.xzz_vv[0] - fd2)) < 1e-4


def test_validate_catalog_problems():
    # every analytic derivative provider agrees with finite differences on
    # the working box at 100 sampled points
    for name, samples in (("bench1d", 100), ("cov2d", 100), ("affine2d", 40)):
        spec = build(name)
        report = pb.validate(spec, samples=samples)
        assert report.ok, f"{name}:\n{report}"


def test_simpson_quadrature():
    xs = np.linspace(0.0, 1.0, 101)
    vals = xs**4
    assert pt.simpson(vals, 0.01) == pytest.approx(0.2, abs=5e-9)
    with pytest.raises(ValueError):
        pt.simpson(np.zeros(4), 0.1)
