from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

extensions = [
    Extension(
        "cmlsnn._kernels._ckernels",
        ["src/cmlsnn/_kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-fno-math-errno"],
        # the numpy fallback covers a failed build
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
