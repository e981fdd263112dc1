"""Build the optional Cython kernel extension.

If Cython or a C compiler is unavailable the package still installs and
``qedg.kernels`` falls back to the NumPy implementation at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("QEDG_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "qedg._kernels",
                    ["src/qedg/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    # no FMA contraction: rotation indices must match the NumPy path bit-for-bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
