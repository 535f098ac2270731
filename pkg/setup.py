import os

import numpy as np
from setuptools import Extension, setup

# DFDDPS_NO_EXT=1 installs the pure-Python package only.
ext_modules = []
if not os.environ.get("DFDDPS_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dfddps._render_ext",
                ["src/dfddps/_render_ext.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
