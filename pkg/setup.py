import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; fedprog falls back to the numpy kernels
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("FEDPROG_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "fedprog._kernels_cy",
                ["src/fedprog/_kernels_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
