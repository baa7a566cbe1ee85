"""Kernel backend selection.

The compiled extension is used when importable; setting
``VALUESTITCH_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VALUESTITCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

silu_forward = _impl.silu_forward
silu_backward = _impl.silu_backward
inverse_cdf = _impl.inverse_cdf

__all__ = ["BACKEND", "silu_forward", "silu_backward", "inverse_cdf"]
