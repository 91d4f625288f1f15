"""Execution engine selection for the hot kernels.

Two interchangeable implementations exist for every hot loop: a numba
``@njit`` kernel and a vectorized pure-numpy fallback. They produce identical
results (tested); selection is purely about speed.

Resolution order:
  1. explicit ``engine=`` argument on the calling operation,
  2. the ``CANARYTRACE_ENGINE`` environment variable (``numba`` | ``numpy``),
  3. ``auto``: numba when importable, numpy otherwise.

Requesting ``numba`` when numba is not importable is an error rather than a
silent downgrade.
"""

from __future__ import annotations

import os

ENGINE_ENV_VAR = "CANARYTRACE_ENGINE"

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on numba-less installs
    HAS_NUMBA = False


def resolve_engine(engine: str | None = None) -> str:
    """Return the concrete engine name, ``"numba"`` or ``"numpy"``."""
    if engine is None:
        engine = os.environ.get(ENGINE_ENV_VAR, "auto")
    engine = engine.lower()
    if engine == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if engine == "numba":
        if not HAS_NUMBA:
            raise RuntimeError(
                "CANARYTRACE_ENGINE=numba requested but numba is not importable"
            )
        return "numba"
    if engine == "numpy":
        return "numpy"
    raise ValueError(f"unknown engine {engine!r}; expected auto, numba, or numpy")
