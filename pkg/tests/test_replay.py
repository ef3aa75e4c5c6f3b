import numpy as np
import pytest

from conjpt import conjugate as cj
from conjpt import pontryagin as pt
from conjpt import problem as pb
from conjpt import replay as rp
from conjpt.catalog import build


def test_replay_at_base_point_reproduces_own_cost(backend):
    spec = build("bench1d")
    z = np.array([0.3])
    res = rp.replay_cost(spec, z, z, steps=400, backend=backend)
    traj = pt.solve_extremal(spec, z, steps=400, backend=backend)
    assert res.cost == pytest.approx(traj.cost, abs=1e-10)
    assert np.array_equal(res.x_tilde[0], traj.x[0])


def test_replay_linear_terminal_cost_closed_form(backend):
    # grad psi = c: the control is -c for every z, so the replay never moves
    # away from the base extremal and g(z, zbar) = T |c|^2 / 2 + psi(zbar)
    spec = pb.cov_problem("u1^2/2", "0.7*z1", 1.0, 1)
    want = 0.5 * 0.7**2 + 0.7 * 0.1
    for z in (-0.4, 0.1, 0.5):
        res = rp.replay_cost(spec, np.array([z]), np.array([0.1]),
                             steps=200, backend=backend)
        assert res.cost == pytest.approx(want, abs=1e-12)


def test_replay_step_doubling_self_convergence():
    spec = build("bench1d")
    z, zbar = np.array([0.25]), np.array([0.1])
    g1 = rp.replay_cost(spec, z, zbar, steps=400).cost
    g2 = rp.replay_cost(spec, z, zbar, steps=800).cost
    assert abs(g1 - g2) <= 1e-9


def test_probe_derivatives_on_benchmark_candidate():
    spec = build("bench1d")
    probe = rp.cost_derivatives(spec, np.zeros(1), np.ones(1), h=1e-2, steps=400)
    assert abs(probe.d1) <= 1e-6
    assert abs(probe.d2) <= 1e-6
    assert probe.d3 == pytest.approx(1.0, abs=1e-3)


def test_probe_first_derivative_vanishes_for_any_direction(backend):
    # the extremal control is a stationary point of the cost functional from
    # x(0, zbar), so theta -> g(zbar + theta v, zbar) is critical at 0 for
    # every direction v, kernel or not
    spec = build("affine2d")
    zbar = np.array([0.5, -0.3])
    for v in (np.array([1.0, 0.0]), np.array([0.6, 0.8])):
        probe = rp.cost_derivatives(spec, zbar, v, steps=200, backend=backend)
        assert abs(probe.d1) <= 1e-6, v


def test_probe_second_derivative_positive_off_kernel():
    # away from conjugate degeneracy the second variation along u_z v is
    # positive definite; this is what the candidate check trips on for a
    # non-kernel direction
    spec = build("affine2d")
    zbar = np.array([0.5, -0.3])
    probe = rp.cost_derivatives(spec, zbar, np.array([1.0, 0.0]), steps=200)
    assert probe.d2 > 1e-3


def test_check_candidate_benchmark_passes():
    spec = build("bench1d")
    cands = cj.scan(spec, [(-1.0, 1.0)], 41, steps=400)
    chk = rp.check_candidate(spec, cands[0], h=1e-2, steps=400)
    assert chk.passed
    assert chk.kappa == pytest.approx(-1.0, abs=1e-6)
    assert chk.d3 == pytest.approx(1.0, abs=1e-3)
    assert abs(chk.d3 + chk.kappa) <= chk.tol_third


def test_check_candidate_fails_for_non_kernel_direction():
    # sensitivity check: replacing the kernel direction by a transverse one
    # must break the vanishing-second-derivative identity
    spec = build("bench1d")
    z = np.array([0.5])  # x_z(0, 0.5) = 0.5, nowhere near singular
    det, smin, v = cj.det_xz(spec, z, steps=200)
    cand = cj.ConjugateCandidate(z=z, x0=z, det_value=det, sigma_min=smin, v=v)
    chk = rp.check_candidate(spec, cand, steps=200)
    assert not chk.passed
    assert abs(chk.d2) > chk.tol_low


def test_quadratic_terminal_cost_third_derivative_vanishes():
    # psi quadratic: x_z(0, .) is identically singular and kappa = 0; the
    # probe's third derivative must vanish within the oracle tolerance
    spec = build("quad1d")
    z = np.array([0.7])
    det, smin, v = cj.det_xz(spec, z, steps=200)
    assert smin <= 1e-10  # identically singular for this cost
    cand = cj.ConjugateCandidate(z=z, x0=z, det_value=det, sigma_min=smin, v=v)
    chk = rp.check_candidate(spec, cand, steps=200)
    assert abs(chk.d3) <= 1e-3
    assert abs(chk.kappa) <= 1e-10
    assert chk.passed


def test_kappa_matches_negative_third_derivative_general_dynamics():
    spec = build("affine2d")
    cands = cj.scan(spec, [(-3.0, 3.0), (-3.0, 3.0)], 2, steps=400,
                    seeds=[np.array([-1.3, 2.4])])
    c = cands[0]
    kappa = cj.necessary_condition(spec, c, steps=400)
    chk = rp.check_candidate(spec, c, h=1e-2, steps=400)
    assert abs(chk.d3 + kappa) <= max(1e-3, 1e-3 * abs(kappa))
    assert chk.passed


def test_richardson_improves_over_plain_stencil():
    spec = build("bench1d")
    plain = rp.cost_derivatives(spec, np.zeros(1), np.ones(1), h=2e-2,
                                steps=400, richardson=False)
    rich = rp.cost_derivatives(spec, np.zeros(1), np.ones(1), h=2e-2,
                               steps=400, richardson=True)
    assert abs(rich.d3 - 1.0) < abs(plain.d3 - 1.0)
