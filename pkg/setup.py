import os

import numpy
from setuptools import Extension, setup

PYX = "src/degenlag/_kernels/_compiled.pyx"

extensions = []
if os.path.exists(PYX):
    try:
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "degenlag._kernels._compiled",
                    [PYX],
                    extra_compile_args=["-O3"],
                    include_dirs=[numpy.get_include()],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # Without Cython the package still installs; the pure-Python
        # backend is selected at import time.
        extensions = []

setup(ext_modules=extensions)
