"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``METANET_CALIB_PURE=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("METANET_CALIB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

forward = _impl.forward
adjoint = _impl.adjoint
DENSITY_CLAMP = _kernels_py.DENSITY_CLAMP
SPEED_FLOOR = _kernels_py.SPEED_FLOOR
