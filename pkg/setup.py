import os

from setuptools import setup

ext_modules = []
if os.environ.get("BARCODESSM_SKIP_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "barcodessm.kernels._scan_cy",
                    ["src/barcodessm/kernels/_scan_cy.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython available: install pure-Python; the scan kernels fall
        # back to the numpy implementation at import time.
        ext_modules = []

setup(ext_modules=ext_modules)
