"""Build hook for the optional compiled matching kernel.

Without Cython or a C compiler the package still installs; the matcher then
runs on its NumPy fallback.
"""

import platform

from setuptools import setup

# hardware popcount; every x86-64 CPU from the last decade has it
_FLAGS = ["-O3", "-mpopcnt"] if platform.machine() in ("x86_64", "AMD64") else ["-O3"]

try:
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "irisgate.matching._kernels",
                ["src/irisgate/matching/_kernels.pyx"],
                extra_compile_args=_FLAGS,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
