"""Build glue for the optional compiled kernel core.

The package is fully functional without the extension (a pure-Python twin of
every kernel ships in npusim.kernels.pure); the extension only makes the hot
per-cycle loops faster.  If Cython or a C compiler is missing the build falls
back to pure-Python silently.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("npusim.kernels._core",
                   ["src/npusim/kernels/_core.pyx"])],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
