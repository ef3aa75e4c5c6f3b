import numpy as np
import pytest

from conjpt import problem as pb
from conjpt.catalog import build


def test_assemble_cov_dynamics():
    spec = build("bench1d")
    x, u = np.array([0.4]), np.array([1.7])
    assert spec.f(x, u) == pytest.approx([1.7])
    assert spec.f(x, np.zeros(1)) == pytest.approx([0.0])


def test_assemble_drift_only():
    spec = build("affine2d")
    x = np.array([0.5, -1.0])
    np.testing.assert_allclose(spec.f(x, np.zeros(2)), [-1.0, -0.5])


def test_linear_drift_jacobian_matches_fd():
    spec = build("affine2d")
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.uniform(-2, 2, 2)
        u = rng.uniform(-2, 2, 2)
        np.testing.assert_allclose(spec.f_x(x, u), A, atol=1e-12)
        fd = pb.fd_derivative(lambda xx: spec.f(xx, u), x)
        np.testing.assert_allclose(spec.f_x(x, u), fd, atol=1e-7)


def test_f_uu_exactly_zero():
    for name in ("bench1d", "cov2d", "affine2d"):
        spec = build(name)
        x = np.full(spec.n, 0.3)
        assert np.count_nonzero(spec.f_uu(x)) == 0


def test_validate_quadratic_cost_passes():
    spec = build("cov2d")
    report = pb.validate(spec, samples=40)
    conv = next(c for c in report.checks if c.name == "uniform_convexity")
    assert conv.passed
    assert "1" in conv.note  # modulus 1 for |u|^2/2
    assert report.ok, str(report)


def test_validate_quartic_cost_fails_uniform_convexity():
    # L = u^4 is convex but not uniformly: L_uu(0) = 0
    cost = pb.RunningCost3.from_expr("u1^4", 1, 1, convexity_modulus=1.0)
    psi = pb.TerminalCost4.from_expr("z1^2", 1)
    spec = pb.cov_problem(cost, psi, 1.0, 1)
    report = pb.validate(spec, samples=30)
    conv = next(c for c in report.checks if c.name == "uniform_convexity")
    assert not conv.passed
    assert not report.ok


def test_validate_terminal_fd():
    spec = pb.cov_problem("u1^2/2", "cos(z1)", 1.0, 1)
    report = pb.validate(spec, samples=25)
    tfd = next(c for c in report.checks if c.name == "terminal_fd")
    assert tfd.passed and tfd.worst < 1e-6


def test_callback_field_fd_fill_matches_expressions():
    exact = pb.VectorField3.from_exprs(["sin(x1)*x2", "x1^2 - x2"], 2)
    approx = pb.VectorField3.from_callbacks(2, value=exact.value)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.uniform(-2, 2, 2)
        np.testing.assert_allclose(approx.jac(x), exact.jac(x), atol=1e-7)
        np.testing.assert_allclose(approx.hess(x), exact.hess(x), atol=1e-4)


def test_callback_cost_fd_fill():
    exact = pb.RunningCost3.from_expr("(u1^2)/2 + 0.1*x1^2*u1", 1, 1)
    approx = pb.RunningCost3.from_callbacks(1, 1, value=exact.value)
    x, u = np.array([0.7]), np.array([-0.4])
    np.testing.assert_allclose(approx.grad_u(x, u), exact.grad_u(x, u), atol=1e-8)
    np.testing.assert_allclose(approx.hess_uu(x, u), exact.hess_uu(x, u), atol=1e-5)


def test_bump_plateau_and_support():
    for y in ([0.0, 0.0], [0.6, 0.7], [0.99, 0.0]):
        parts = pb.bump_bundle(np.array(y), 4)
        assert parts[0] == 1.0
        for k in range(1, 5):
            assert np.count_nonzero(parts[k]) == 0
    for y in ([2.5, 0.0], [2.0, 2.0]):
        parts = pb.bump_bundle(np.array(y), 4)
        assert parts[0] == 0.0
        for k in range(1, 5):
            assert np.count_nonzero(parts[k]) == 0


def test_bump_annulus_derivatives_match_fd():
    y = np.array([1.2, 0.5])

    def level(k):
        return lambda yy: np.atleast_1d(pb.bump_bundle(yy, k)[k]).astype(float) \
            if k else np.atleast_1d(pb.bump_bundle(yy, 0)[0])

    for k in range(4):
        fn = lambda yy, _k=k: np.asarray(pb.bump_bundle(yy, _k)[_k])
        fd = pb.fd_derivative(fn, y)
        got = pb.bump_bundle(y, k + 1)[k + 1]
        assert np.max(np.abs(got - fd)) < 1e-5, k


def test_windowed_cost_identity_inside():
    inner = pb.TerminalCost4.from_expr("-(z1^2)/2 + z1^3/6", 1)
    psi = pb.windowed_cost(inner, 5.0)
    for z in np.linspace(-4.9, 4.9, 9):
        zz = np.array([z])
        assert psi.value(zz) == pytest.approx(inner.value(zz), rel=1e-15)
        np.testing.assert_allclose(psi.third(zz), inner.third(zz), rtol=1e-15)
    assert psi.value(np.array([10.5])) == 0.0


def test_perturbed_cost_zero_theta_identity():
    base = pb.TerminalCost4.from_expr("cos(z1) + 0.5*sin(z1+z2)", 2)
    params = pb.PerturbationParams.zeros([[0.3, -0.2]])
    pert = pb.perturbed_cost(base, params)
    rng = np.random.default_rng(5)
    for _ in range(6):
        z = rng.uniform(-3, 3, 2)
        assert pert.value(z) == base.value(z)
        np.testing.assert_allclose(pert.fourth(z), base.fourth(z), atol=0)


def test_perturbed_cost_outside_support_identity():
    base = pb.TerminalCost4.from_expr("cos(z1) + 0.5*sin(z1+z2)", 2)
    params = pb.PerturbationParams(anchors=[[0.0, 0.0]],
                                   quad=[[[0.4, 0.1], [0.2, -0.3]]],
                                   cubic=[[0.05, -0.02]])
    pert = pb.perturbed_cost(base, params)
    for z in ([2.5, 0.0], [0.0, -2.01], [3.0, 3.0]):
        zz = np.asarray(z, dtype=float)
        assert pert.value(zz) == base.value(zz)
        np.testing.assert_allclose(pert.hess(zz), base.hess(zz), atol=0)


def test_perturbed_cost_hessian_shift_at_anchor():
    base = pb.TerminalCost4.from_expr("cos(z1) + 0.5*sin(z1+z2)", 2)
    quad = np.array([[0.3, 0.1], [0.05, -0.2]])
    cubic = np.array([0.02, -0.03])
    anchor = np.array([0.2, -0.1])
    pert = pb.perturbed_cost(base, pb.PerturbationParams([anchor], [quad], [cubic]))
    shift = pert.hess(anchor) - base.hess(anchor)
    np.testing.assert_allclose(shift, quad + quad.T, atol=1e-14)
    # third derivative diagonal picks up 6 theta_k
    d3 = pert.third(anchor) - base.third(anchor)
    assert d3[0, 0, 0] == pytest.approx(6 * cubic[0])
    assert d3[1, 1, 1] == pytest.approx(6 * cubic[1])


def test_perturbed_cost_fd_agreement_including_annulus():
    base = pb.TerminalCost4.from_expr("cos(z1) + 0.5*sin(z1+z2)", 2)
    params = pb.PerturbationParams(anchors=[[0.3, -0.4]],
                                   quad=[[[0.2, -0.1], [0.15, 0.25]]],
                                   cubic=[[0.04, -0.06]])
    pert = pb.perturbed_cost(base, params)
    pts = [np.array([0.3, -0.4]), np.array([1.1, 0.4]),  # plateau and annulus
           np.array([1.6, -1.2]), np.array([-0.5, 0.9])]
    for z in pts:
        fd1 = pb.fd_derivative(lambda zz: np.atleast_1d(pert.value(zz)), z)[0]
        assert np.max(np.abs(pert.grad(z) - fd1)) < 1e-5
        fd2 = pb.fd_derivative(pert.grad, z)
        assert np.max(np.abs(pert.hess(z) - fd2)) < 1e-5
        fd3 = pb.fd_derivative(pert.hess, z)
        assert np.max(np.abs(pert.third(z) - fd3)) < 1e-5
        fd4 = pb.fd_derivative(pert.third, z)
        assert np.max(np.abs(pert.fourth(z) - fd4)) < 1e-4


def test_batch_bundles_match_scalar():
    base = pb.TerminalCost4.from_expr("cos(z1) + 0.5*sin(z1+z2)", 2)
    params = pb.PerturbationParams(anchors=[[0.3, -0.4]],
                                   quad=[[[0.2, -0.1], [0.15, 0.25]]],
                                   cubic=[[0.04, -0.06]])
    for cost in (base, pb.perturbed_cost(base, params),
                 pb.windowed_cost(base, 2.0)):
        Z = np.array([[0.3, -0.4], [1.4, 0.2], [2.6, -2.6], [0.0, 0.0]])
        for order in (3, 4):
            batch = cost.bundle_batch(Z, order)
            for i, z in enumerate(Z):
                parts = cost.bundle(z, order)
                for k in range(order + 1):
                    np.testing.assert_allclose(batch[k][i], parts[k], atol=1e-13)


def test_dimension_validation():
    with pytest.raises(ValueError):
        pb.cov_problem("u1^2/2", "z1^2", -1.0, 1)
    psi = pb.TerminalCost4.from_expr("z1^2 + z2^2", 2)
    with pytest.raises(ValueError):
        pb.cov_problem("u1^2/2", psi, 1.0, 1)  # terminal dim mismatch
