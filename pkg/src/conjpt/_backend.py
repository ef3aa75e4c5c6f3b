"""Backend selection: compiled sweep kernels with a pure-Python twin.

The compiled extension (`conjpt._kernels`, Cython) implements the hot
integration sweeps; `conjpt._purekernels` implements the identical algorithms
in numpy.  Selection order:

1. an explicit ``backend=`` argument ("compiled" | "python"),
2. the ``CONJPT_BACKEND`` environment variable,
3. "compiled" when the extension imported and the problem provides kernel
   tapes, else "python".
"""

from __future__ import annotations

import os

try:
    from conjpt import _kernels  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on build environment
    _kernels = None
    HAVE_COMPILED = False

_VALID = ("compiled", "python")


def available_backends() -> tuple[str, ...]:
    return _VALID if HAVE_COMPILED else ("python",)


def default_backend() -> str:
    env = os.environ.get("CONJPT_BACKEND")
    if env:
        if env not in _VALID:
            raise ValueError(f"CONJPT_BACKEND must be one of {_VALID}, got {env!r}")
        if env == "compiled" and not HAVE_COMPILED:
            raise RuntimeError("CONJPT_BACKEND=compiled but the extension is not built")
        return env
    return "compiled" if HAVE_COMPILED else "python"


def resolve_backend(backend: str | None, have_tapes: bool) -> str:
    """Pick the backend for one solve.

    Problems without kernel tapes (callback-backed dynamics or running cost)
    always run on the Python kernels; asking for "compiled" on them is an
    error rather than a silent fallback.
    """
    if backend is not None:
        if backend not in _VALID:
            raise ValueError(f"backend must be one of {_VALID}, got {backend!r}")
        if backend == "compiled":
            if not HAVE_COMPILED:
                raise RuntimeError("compiled backend requested but the extension is not built")
            if not have_tapes:
                raise ValueError(
                    "compiled backend requires expression-backed dynamics and running cost"
                )
        return backend
    picked = default_backend()
    if picked == "compiled" and not have_tapes:
        return "python"
    return picked
