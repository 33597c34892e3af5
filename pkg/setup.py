"""Build hook for the optional compiled kernels.

If Cython or a compiler is missing the package still installs and
``dattr.kernels`` falls back to the NumPy implementation.
"""

import os
import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"compiled kernels not built ({exc}); using the NumPy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            warnings.warn(f"compiled kernels not built ({exc}); using the NumPy fallback")


def extensions():
    if os.environ.get("DATTR_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        warnings.warn("Cython not found; skipping compiled kernels")
        return []
    # no -march=native or -ffast-math: keeps results bitwise stable across machines
    ext = Extension("dattr._ckernels", ["src/dattr/_ckernels.pyx"],
                    extra_compile_args=["-O2", "-ffp-contract=off"])
    return cythonize([ext], language_level=3, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
