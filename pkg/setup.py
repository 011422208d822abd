import platform
import sys

import numpy as np
from setuptools import Extension, setup

def _cpu_flags():
    try:
        with open("/proc/cpuinfo") as fh:
            return {f for line in fh if line.startswith("flags") for f in line.split(":", 1)[1].split()}
    except OSError:
        return set()


compile_args = ["-O3"]
libraries = []
if sys.platform.startswith("linux") and platform.machine() == "x86_64" and {"avx2", "fma"} <= _cpu_flags():
    # glibc libmvec supplies the SIMD tanh the scan loops vectorize onto.
    compile_args += ["-ffast-math", "-mavx2", "-mfma"]
    libraries += ["mvec", "m"]

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "dbean._scan",
                ["src/dbean/_scan.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                libraries=libraries,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
