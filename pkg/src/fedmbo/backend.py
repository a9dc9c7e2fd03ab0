"""Selection between the compiled kernels and the numpy fallback.

The compiled extension is used when it imports and the environment variable
``FEDMBO_PURE_PYTHON`` is unset.  Both paths produce identical random draws;
floating-point results of the kernels agree to rounding.
"""

import os

from . import _purepy

try:
    if os.environ.get("FEDMBO_PURE_PYTHON"):
        raise ImportError("compiled core disabled by FEDMBO_PURE_PYTHON")
    from . import _core
except ImportError:
    _core = None

COMPILED = _core is not None
_BACKENDS = ("auto", "compiled", "python")
_default = "compiled" if COMPILED else "python"


def compiled_available():
    return COMPILED


def set_backend(name):
    """Set the process-wide default backend ("auto", "compiled" or "python")."""
    global _default
    _default = resolve_name(name)


def active_backend():
    return _default


def resolve_name(name=None):
    """Map a requested backend name to the one that will actually run."""
    if name is None:
        return _default
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {_BACKENDS}")
    if name == "auto":
        return "compiled" if COMPILED else "python"
    if name == "compiled" and not COMPILED:
        raise ValueError("compiled backend requested but the extension is not built")
    return name


def kernels(name=None):
    """The compiled module for ``name`` or ``None`` when the fallback applies."""
    return _core if resolve_name(name) == "compiled" else None


def stream_keys(seed, labels):
    mod = _core if _default == "compiled" else _purepy
    return mod.stream_keys(int(seed) & 0xFFFFFFFFFFFFFFFF, labels)


def uniform_float(keys, counters):
    mod = _core if _default == "compiled" else _purepy
    return mod.uniform_float(keys, counters)


def uniform_index(keys, counters, sizes):
    mod = _core if _default == "compiled" else _purepy
    return mod.uniform_index(keys, counters, sizes)
