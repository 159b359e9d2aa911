"""Backend selection for the hot ripmap kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback in :mod:`ripnerf._kernels_py` is used.  Both produce the same
results up to floating-point summation order.
"""

import logging

from . import _kernels_py

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _BACKENDS.get("cython", _kernels_py)


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "cython" if _active is _compiled and _compiled is not None else "python"


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {available_backends()})")
    prev = backend_name()
    _active = _BACKENDS[name]
    return prev


def ripmap_forward(*args):
    return _active.ripmap_forward(*args)


def ripmap_backward(*args):
    return _active.ripmap_backward(*args)
