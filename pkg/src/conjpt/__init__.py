"""Conjugate-point toolkit for control-affine Bolza problems.

Computes Pontryagin extremals backward from terminal data, their first and
second order sensitivities with respect to the terminal point, locates
candidate conjugate points, evaluates a third-order necessary condition on
them, and provides a closed-form fast path for the fixed-endpoint-free
calculus-of-variations case, including transversality certification of the
degeneracy set and perturbation experiments.
"""

from conjpt._backend import available_backends, default_backend

__version__ = "0.1.0"

__all__ = ["available_backends", "default_backend", "__version__"]
