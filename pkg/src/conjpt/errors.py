"""Solver failure types."""

from __future__ import annotations


class SolverError(RuntimeError):
    """Base class for numerical solver failures."""


class ControlSolveError(SolverError):
    """The pointwise control minimization did not converge.

    Usually signals a violated convexity assumption or badly scaled data.
    """


class NonFiniteTrajectoryError(SolverError):
    """A state, costate or sensitivity turned non-finite during integration."""
