"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``ADAKV_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("ADAKV_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

quantize_rows = _impl.quantize_rows
hetero_attention = _impl.hetero_attention

__all__ = ["BACKEND", "quantize_rows", "hetero_attention"]
