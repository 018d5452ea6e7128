"""Build script for the optional compiled kernels.

The extension accelerates the per-step local SGD loops. If Cython or a C
compiler is unavailable the package still installs and falls back to the
numpy implementation in fedfair.kernels.pure.

-ffp-contract=off is required: fused multiply-adds would change the rounding
of the update step and break the bit-level agreement between the compiled
loop and the numpy reference path.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "fedfair.kernels._speedups",
        ["src/fedfair/kernels/_speedups.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O2", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

if cythonize is not None:
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
