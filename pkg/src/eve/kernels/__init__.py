"""Hot inner-loop kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import from ``EVE_KERNELS`` (``numba`` or
``numpy``); unset means numba when it imports cleanly. ``use_backend`` swaps
it at runtime, which the kernel benchmark and the parity tests rely on.
"""
import os
import logging

from . import _numpy

log = logging.getLogger(__name__)

_NAMES = (
    "gelu_fwd", "gelu_bwd", "layernorm_fwd", "layernorm_bwd", "softmax_fwd",
    "masked_softmax_fwd", "softmax_bwd", "cross_entropy_fwd", "slot_combine",
    "adamw_update",
)

BACKEND = "numpy"


def _load(name):
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba
        return _numba
    raise ValueError(f"unknown kernel backend {name!r} (expected 'numba' or 'numpy')")


def use_backend(name):
    """Rebind every kernel in this namespace to ``name``'s implementation."""
    global BACKEND
    mod = _load(name)
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(mod, fn)
    BACKEND = name


def available_backends():
    out = ["numpy"]
    try:
        _load("numba")
        out.append("numba")
    except ImportError:
        pass
    return out


_requested = os.environ.get("EVE_KERNELS", "").strip().lower()
if _requested:
    use_backend(_requested)
else:
    try:
        use_backend("numba")
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable, falling back to numpy kernels")
        use_backend("numpy")
