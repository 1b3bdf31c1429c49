"""Build the optional Cython kernels.

The package works without them: ``uncalib._backend`` falls back to the
pure-Python implementations when the extension is missing.

    python setup.py build_ext --inplace
"""
import os
import warnings

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    warnings.warn("Cython or numpy not found; building without compiled kernels.")
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("UNCALIB_NO_EXT"):
    extensions = [
        Extension(
            "uncalib._kernels",
            ["src/uncalib/_kernels.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            # no FMA contraction: results must match the numpy fallback bit for bit
            extra_compile_args=["-O3", "-ffp-contract=off"],
        )
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
