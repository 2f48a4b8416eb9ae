"""Stencil kernel backend selection.

The compiled extension is preferred when it imported cleanly; the pure-numpy
implementation is the fallback. Set ``PDEBLUR_BACKEND=numpy`` (or ``cython``)
to force a backend; forcing ``cython`` when the extension is missing raises.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _stencilc
except ImportError:
    _stencilc = None

_BACKENDS = {"numpy": numpy_backend}
if _stencilc is not None:
    _BACKENDS["cython"] = _stencilc


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str | None = None):
    """Resolve a backend module by name, env override, or default preference."""
    if name is None:
        name = os.environ.get("PDEBLUR_BACKEND")
    if name is None:
        name = "cython" if _stencilc is not None else "numpy"
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"stencil backend {name!r} not available; have {available_backends()}"
        ) from None


_active = get_backend()

BACKEND = _active.NAME
step_forward = _active.step_forward
step_adjoint = _active.step_adjoint
