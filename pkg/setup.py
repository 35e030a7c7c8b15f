import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Compile the kernel extension when possible; the pure-numpy path covers failures."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


ext_modules = []
if os.environ.get("TITANET_LID_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "titanet_lid.nn._kernels",
                    ["src/titanet_lid/nn/_kernels.pyx"],
                    extra_compile_args=["-O3", "-fno-trapping-math"],
                )
            ],
            language_level=3,
        )

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
