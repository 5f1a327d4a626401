"""Kernel backend selection.

Two interchangeable implementations of the coupling-layer elementwise
kernels exist: a Cython extension (``_speedups``) and a pure numpy fallback
(``_numpy_backend``). The active one is chosen at import time from the
``INNSCRIBE_BACKEND`` environment variable (``auto`` | ``compiled`` |
``numpy``; default ``auto`` prefers the extension when it imported cleanly)
and can be swapped at runtime with :func:`set_backend`. Callers address the
kernels through this module so the swap is late-bound.

Both backends compute the same operations; results agree to round-off but
are not guaranteed bit-identical (libm vs numpy SIMD transcendentals), so
reproducibility contracts hold per backend.
"""

import os

from . import _numpy_backend

_BACKENDS = {"numpy": _numpy_backend}

try:
    from . import _speedups

    _BACKENDS["compiled"] = _speedups
except ImportError:
    _speedups = None

_EXPORTED = ("cexp", "cexp_vjp", "leaky", "leaky_vjp", "scale_shift", "unscale_shift")

_active_name = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    return _active_name


def set_backend(name: str) -> str:
    """Activate a backend by name ('auto' picks compiled when present)."""
    global _active_name
    if name == "auto":
        name = "compiled" if "compiled" in _BACKENDS else "numpy"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    mod = _BACKENDS[name]
    for fn in _EXPORTED:
        globals()[fn] = getattr(mod, fn)
    _active_name = name
    return name


set_backend(os.environ.get("INNSCRIBE_BACKEND", "auto"))
