"""Kernel selection at import time.

Set ``UNCALIB_PURE_PYTHON=1`` to force the numpy fallback even when the
compiled extension is available.
"""
import os

from . import _kernels_py

if os.environ.get("UNCALIB_PURE_PYTHON", "").strip() not in ("", "0"):
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "cython"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"

sg_centered = kernels.sg_centered
scan = kernels.scan
