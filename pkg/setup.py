"""Build script for the optional compiled kernel.

The package works without the extension (a numpy fallback is selected at
import time), so any failure to cythonize or compile downgrades the build
to pure python instead of aborting it. OpenMP is probed with a throwaway
compile; without it the kernel's candidate loop runs serially.
"""

import os
import tempfile

from setuptools import Extension, setup


def have_openmp() -> bool:
    if os.environ.get("NQS_NO_OPENMP"):
        return False
    try:
        from distutils.ccompiler import new_compiler
        from distutils.errors import CCompilerError, DistutilsExecError
    except ImportError:
        return False
    src = "#include <omp.h>\nint main(void) { return omp_get_num_threads(); }\n"
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "omp_probe.c")
        with open(path, "w") as fh:
            fh.write(src)
        cc = new_compiler()
        try:
            objs = cc.compile([path], output_dir=tmp, extra_postargs=["-fopenmp"])
            cc.link_executable(
                objs, os.path.join(tmp, "omp_probe"), extra_postargs=["-fopenmp"]
            )
        except (CCompilerError, DistutilsExecError, OSError):
            return False
    return True


def make_extensions():
    if os.environ.get("NQS_NO_EXTENSION"):
        return []
    if not os.path.exists("src/nqs/_kernels.pyx"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    compile_args = ["-O3"]
    link_args = []
    if have_openmp():
        compile_args.append("-fopenmp")
        link_args.append("-fopenmp")
    ext = Extension(
        "nqs._kernels",
        ["src/nqs/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=compile_args,
        extra_link_args=link_args,
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=make_extensions())
