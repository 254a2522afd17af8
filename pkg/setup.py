import os

from setuptools import setup

ext_modules = []
if not os.environ.get("EEPIPE_PURE_PYTHON"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "eepipe._ckernels",
                    ["src/eepipe/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # Without Cython the package still works through the numpy kernels.
        ext_modules = []

setup(ext_modules=ext_modules)
