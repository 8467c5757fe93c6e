"""Build the optional compiled simulation kernel.

If Cython or a C compiler is unavailable the package still installs and the
numpy fallback in ``orthoddc._pykernels`` is used.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("orthoddc._kernels", ["src/orthoddc/_kernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
