"""Build script: compiles the optional Cython kinematics core.

The package is fully functional without the extension (a pure-numpy
fallback is selected at import time), so compilation failures are
downgraded to a warning instead of aborting the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "egokin._kin_c",
                ["src/egokin/_kin_c.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - depends on build host
    sys.stderr.write(
        f"egokin: skipping compiled kinematics core ({exc!r}); "
        "the pure-numpy fallback will be used\n"
    )

setup(ext_modules=ext_modules)
