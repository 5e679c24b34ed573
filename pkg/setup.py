import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "sketchseg.raster._gridcy",
                ["src/sketchseg/raster/_gridcy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    # No Cython: install pure-Python; sketchseg.raster falls back to the
    # numpy kernels at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
