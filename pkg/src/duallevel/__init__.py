"""Dual-level pseudo-label self-training with a labeled instance bank."""

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]


def __getattr__(name):
    # resolved lazily so the CLI can pin BLAS threads before numpy loads
    if name == "BACKEND":
        from duallevel.kernels import BACKEND

        return BACKEND
    raise AttributeError(name)
