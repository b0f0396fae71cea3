"""Build the optional Cython kernels.

The package works without them: ``nrpn._backend`` falls back to the numpy
implementation when ``nrpn._kernels`` cannot be imported.  Set
``NRPN_NO_EXT=1`` to skip compilation entirely.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("NRPN_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "nrpn._kernels",
                    ["src/nrpn/_kernels.pyx"],
                    # keep IEEE semantics so results match the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
