import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None and os.environ.get("LKA3D_NO_EXT", "0") != "1":
    extensions = cythonize(
        [
            Extension(
                "lka3d._kernels._convext",
                sources=["src/lka3d/_kernels/_convext.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=extensions)
