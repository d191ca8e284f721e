import platform

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# hardware popcount; without it __builtin_popcountll is a bit-twiddling loop
ARCH_FLAGS = ["-mpopcnt"] if platform.machine().lower() in ("x86_64", "amd64") else []

extensions = [
    Extension(
        "bireal._binconv",
        ["src/bireal/_binconv.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", *ARCH_FLAGS],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
