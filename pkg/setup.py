import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # The package falls back to the numpy kernels at runtime.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "bundlegen.kernels._compiled",
                ["src/bundlegen/kernels/_compiled.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
