"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise, or when
``DUALLEVEL_PURE_PYTHON=1`` is set, the numpy fallback in ``_core_py`` is
used. ``BACKEND`` names the active one.
"""
import os

from duallevel import _core_py

if os.environ.get("DUALLEVEL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _core_py
    BACKEND = "python"
else:
    try:
        from duallevel import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _core_py
        BACKEND = "python"

SMOOTHING = _core_py.SMOOTHING
SCALING = _core_py.SCALING
FLAG_Q_FALLBACK = _core_py.FLAG_Q_FALLBACK
FLAG_Z_FALLBACK = _core_py.FLAG_Z_FALLBACK

boundary_mask = _impl.boundary_mask
lloyd_assign = _impl.lloyd_assign
regenerate = _impl.regenerate

__all__ = ["BACKEND", "boundary_mask", "lloyd_assign", "regenerate"]
