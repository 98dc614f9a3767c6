"""Build the optional Cython HNSW kernel.

The package works without it: ``visrec.ann.kernels`` falls back to the
pure-Python implementation when the extension is missing.
"""
import os
import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: skipping Cython kernel ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: failed to build {ext.name} ({exc})", file=sys.stderr)


ext_modules = []
if os.environ.get("VISREC_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython not available, pure-Python kernel only", file=sys.stderr)
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "visrec.ann._hnsw_kernels",
                    ["src/visrec/ann/_hnsw_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
