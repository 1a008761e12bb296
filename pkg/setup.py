import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "kmips.kernels._ckern",
                ["src/kmips/kernels/_ckern.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: the package still works on the numpy kernels.
    ext_modules = []

setup(ext_modules=ext_modules)
