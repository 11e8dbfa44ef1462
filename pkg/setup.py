"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only disables the fast path. Set
FEDSIM_PURE_PYTHON=1 to skip the extension build entirely.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("FEDSIM_PURE_PYTHON") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "fedsim.backends._core",
                    ["src/fedsim/backends/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError as exc:
        print(f"fedsim: skipping compiled backend ({exc}); numpy fallback will be used")
        ext_modules = []

setup(ext_modules=ext_modules)
