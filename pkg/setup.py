"""Builds the optional compiled kernels; the package works without them."""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("KOODOS_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("koodos._kernels", ["src/koodos/_kernels.pyx"],
                       extra_compile_args=["-O3", "-ffp-contract=off"])],
            language_level=3,
        )

setup(ext_modules=ext_modules)
