"""Backend selection for the closed-loop integrator.

The compiled extension is used when it imports; otherwise the pure-Python
implementation is used. Set ``TELEOGRASP_BACKEND=python`` to force the
fallback (both produce identical numbers, only speed differs).
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def available_backends():
    return sorted(_BACKENDS)


def _default():
    forced = os.environ.get("TELEOGRASP_BACKEND")
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(f"kernel backend {forced!r} unavailable; have {available_backends()}")
        return forced
    return "compiled" if _compiled is not None else "python"


BACKEND = _default()


def set_backend(name: str) -> None:
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {available_backends()}")
    BACKEND = name


def simulate_arm(*args, backend: str | None = None):
    return _BACKENDS[backend or BACKEND].simulate_arm(*args)
