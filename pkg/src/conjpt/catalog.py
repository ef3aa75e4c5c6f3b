"""Built-in problem catalog, addressable by name from the CLI and tests."""

from __future__ import annotations

from conjpt.problem import (
    ProblemSpec,
    TerminalCost4,
    control_affine_problem,
    cov_problem,
    windowed_cost,
)

__all__ = ["names", "build", "mode_of"]


def _bench1d() -> ProblemSpec:
    # 1D benchmark: quadratic velocity cost, cubic-well terminal cost, cut off
    # outside radius 5 so the terminal cost is bounded with bounded derivatives
    psi = windowed_cost(TerminalCost4.from_expr("-(z1^2)/2 + z1^3/6", 1), 5.0)
    return cov_problem("u1^2/2", psi, 1.0, 1, label="bench1d")


def _bench1d_quartic() -> ProblemSpec:
    # degenerate variant: even terminal cost, the zero of x_z at the origin is
    # second order and the full degeneracy map vanishes there
    psi = windowed_cost(TerminalCost4.from_expr("-(z1^2)/2 + z1^4/24", 1), 5.0)
    return cov_problem("u1^2/2", psi, 1.0, 1, label="bench1d_quartic")


def _quad1d() -> ProblemSpec:
    psi = windowed_cost(TerminalCost4.from_expr("-(z1^2)/2", 1), 5.0)
    return cov_problem("u1^2/2", psi, 1.0, 1, label="quad1d")


def _cov1d_quartic_control() -> ProblemSpec:
    psi = windowed_cost(TerminalCost4.from_expr("-(z1^2)/2 + z1^3/6", 1), 5.0)
    return cov_problem("u1^2/2 + u1^4/12", psi, 1.0, 1, label="cov1d_quartic_control")


def _cov2d() -> ProblemSpec:
    return cov_problem("(u1^2+u2^2)/2", "cos(z1) + 0.5*sin(z1+z2)", 1.0, 2,
                       label="cov2d")


def _cov2d_quadpsi() -> ProblemSpec:
    return cov_problem("(u1^2+u2^2)/2", "-(z1^2+z2^2)/4 + z1*z2/8", 1.0, 2,
                       label="cov2d_quadpsi")


def _affine2d() -> ProblemSpec:
    # rotation drift with unit control fields and state-dependent running cost
    return control_affine_problem(
        f0=["x2", "-x1"], f_list=[["1", "0"], ["0", "1"]],
        L="(u1^2+u2^2)/2 + 0.1*(x1^2+x2^2)",
        psi="cos(z1) + 0.5*sin(z1+z2)", T=1.0, n=2, m=2, label="affine2d")


def _trig3d() -> ProblemSpec:
    # separable 3D trig cost.  Deliberately kept: it is maximally non-generic
    # (both determinant factors vanish to second order and the degeneracy
    # map's scalar part vanishes identically on the singular set), which makes
    # it the showcase input for the perturbation experiment in n = 3.
    return cov_problem("(u1^2+u2^2+u3^2)/2", "cos(z1) + 0.5*sin(z2+z3)", 1.0, 3,
                       label="trig3d")


def _trig3d_generic() -> ProblemSpec:
    # the 2D trig example suspended in n = 3: the zero set of the degeneracy
    # map is a transversal one-dimensional manifold (vertical lines through
    # the planar zero), the structure expected of a generic cost
    return cov_problem("(u1^2+u2^2+u3^2)/2", "cos(z1) + 0.5*sin(z1+z2)", 1.0, 3,
                       label="trig3d_generic")


_CATALOG = {
    "bench1d": (_bench1d, "cov"),
    "bench1d_quartic": (_bench1d_quartic, "cov"),
    "quad1d": (_quad1d, "cov"),
    "cov1d_quartic_control": (_cov1d_quartic_control, "cov"),
    "cov2d": (_cov2d, "cov"),
    "cov2d_quadpsi": (_cov2d_quadpsi, "cov"),
    "affine2d": (_affine2d, "general"),
    "trig3d": (_trig3d, "cov"),
    "trig3d_generic": (_trig3d_generic, "cov"),
}


def names() -> list[str]:
    return sorted(_CATALOG)


def build(name: str) -> ProblemSpec:
    try:
        builder, _ = _CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown builtin problem {name!r}; available: {names()}") from None
    return builder()


def mode_of(name: str) -> str:
    return _CATALOG[name][1]
