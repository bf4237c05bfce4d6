"""Builds the optional compiled kernels; the package works without them.

    pip install -e . --no-build-isolation
    python setup.py build_ext --inplace
"""
from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("icp_reasoner._ckernels", ["src/icp_reasoner/_ckernels.pyx"],
                   include_dirs=[numpy.get_include()],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
