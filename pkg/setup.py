import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: Cython regenerates the C when present,
# otherwise the shipped _native.c is compiled directly, and if no compiler is
# available the build continues and the package falls back to the pure numpy
# implementation at import time.
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

PYX = "src/gridse/kernels/_native.pyx"
GEN_C = "src/gridse/kernels/_native.c"


def make_ext(source):
    return Extension(
        "gridse.kernels._native",
        [source],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )


if cythonize is not None:
    ext_modules = cythonize([make_ext(PYX)],
                            compiler_directives={"language_level": 3})
elif os.path.exists(GEN_C):
    ext_modules = [make_ext(GEN_C)]
else:
    ext_modules = []

setup(ext_modules=ext_modules)
