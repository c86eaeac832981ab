import os

from setuptools import Extension, setup

ext_modules = []
if os.path.exists("src/filterkit/_ckernels.pyx"):
    from Cython.Build import cythonize
    import numpy as np

    ext = Extension(
        "filterkit._ckernels",
        ["src/filterkit/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
