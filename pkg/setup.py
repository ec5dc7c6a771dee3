import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

_PYX = os.path.join("src", "ehrseq", "neural", "_kernels.pyx")

# The compiled kernels are optional: if the build fails (no compiler, no
# Cython) the package falls back to the pure-numpy implementations in
# ehrseq.neural.kernels_py at import time.
ext_modules = [
    Extension(
        "ehrseq.neural._kernels",
        [_PYX],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

if cythonize is not None and os.path.exists(_PYX):
    ext_modules = cythonize(ext_modules, compiler_directives={"language_level": "3"})
else:
    ext_modules = []

setup(ext_modules=ext_modules)
