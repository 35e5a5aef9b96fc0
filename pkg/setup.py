import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; nsgp falls back to numpy kernels
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("NSGP_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "nsgp._kernels",
                ["src/nsgp/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
