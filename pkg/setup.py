"""Build script for the optional Cython compositing kernel.

The package works without the extension (a pure-Python kernel is selected at
import time), so a missing Cython or a failed compile only costs speed.
-ffp-contract=off keeps the compiled kernel bitwise-identical to the
pure-Python reference (no FMA contraction of a*b+c).
"""
import sys

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "dynsplat.splat._compositing_cy",
        sources=["src/dynsplat/splat/_compositing_cy.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize(
        [ext],
        language_level="3",
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except ImportError as exc:
    print(f"dynsplat: Cython/numpy unavailable ({exc}); "
          "building without the compiled kernel", file=sys.stderr)

setup(ext_modules=ext_modules)
