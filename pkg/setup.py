"""Build hook for the optional compiled kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a missing compiler or Cython must not break the
install: in that case we simply build no extension modules.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "stattn._kernels._fastcore",
                ["src/stattn/_kernels/_fastcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
