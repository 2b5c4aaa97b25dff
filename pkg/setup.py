"""Build script: compiles the optional Cython kernel extension.

Set DYREX_SKIP_EXT=1 to install without the compiled kernels; the package
then falls back to the pure-Python (numpy) kernels at import time.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("DYREX_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize

        # -ffp-contract=off: no FMA contraction, so the compiled kernels are
        # bit-identical to a plain-Python double loop (same rounding per op).
        ext_modules = cythonize(
            [
                Extension(
                    "dyrex._ckernels",
                    ["src/dyrex/_ckernels.pyx"],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
