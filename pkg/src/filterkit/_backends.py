"""Kernel backend selection.

The compiled Cython backend and the pure-Python backend expose the same
kernel functions over the same numpy arrays.  The compiled one is preferred
when its extension module imported cleanly; either can be forced by name.
"""

from __future__ import annotations

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built on this install
    _ckernels = None

DEFAULT = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    """Names of usable backends, preferred first."""
    names = []
    if _ckernels is not None:
        names.append("c")
    names.append("py")
    return names


def get_backend(name="auto"):
    """Resolve a backend module by name: "auto", "c", or "py"."""
    if name == "auto":
        return DEFAULT
    if name == "c":
        if _ckernels is None:
            raise RuntimeError(
                "compiled backend requested but the extension is not available")
        return _ckernels
    if name == "py":
        return _pykernels
    raise ValueError("unknown backend %r (expected 'auto', 'c' or 'py')" % (name,))
