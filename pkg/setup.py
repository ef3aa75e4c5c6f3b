"""Build script: compiles the accelerator extension when a toolchain is available.

The package is fully functional without the extension; the pure-Python
kernels are selected at import time if `conjpt._kernels` is missing.
Set CONJPT_NO_EXT=1 to skip the compilation attempt entirely.
"""

import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class _OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or broken: fall back to pure Python
            sys.stderr.write(f"conjpt: skipping C extension build ({exc})\n")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            sys.stderr.write(f"conjpt: failed to build {ext.name} ({exc}); "
                             "falling back to pure-Python kernels\n")


def _extensions():
    if os.environ.get("CONJPT_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "conjpt._kernels",
        ["src/conjpt/_kernels.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=_extensions(), cmdclass={"build_ext": _OptionalBuildExt})
