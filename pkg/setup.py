"""Build hook: compiles the optional Cython kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any failure here downgrades to a pure-Python
install instead of aborting.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mtca.tensor.kernels._ckernels",
                ["src/mtca/tensor/kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception:
    ext_modules = []

setup(ext_modules=ext_modules)
