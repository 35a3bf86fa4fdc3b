"""Kernel backend selection.

The hot inner loops (convolution, correlation, warping) exist twice: a numba
@njit implementation and a vectorized pure-numpy fallback. The active backend
is chosen once at import from STEREO_SEMISUP_BACKEND:

    auto   use numba when importable, else numpy (default)
    numba  require numba, fail loudly if missing
    numpy  force the pure-numpy path

`set_backend` exists so tests and the benchmark can flip at runtime.
"""

import os

from .errors import ConfigError

try:
    import numba  # noqa: F401
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

_VALID = ("auto", "numba", "numpy")


def _resolve(name: str) -> str:
    if name not in _VALID:
        raise ConfigError(f"STEREO_SEMISUP_BACKEND must be one of {_VALID}, got {name!r}")
    if name == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if name == "numba" and not HAS_NUMBA:
        raise ConfigError("STEREO_SEMISUP_BACKEND=numba but numba is not importable")
    return name


_backend = _resolve(os.environ.get("STEREO_SEMISUP_BACKEND", "auto"))


def active_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch kernel implementations; returns the previous backend name."""
    global _backend
    prev = _backend
    _backend = _resolve(name)
    return prev


def deterministic_mode() -> bool:
    """Spec'd switch: forces single-worker, in-order consumption everywhere.

    Kernels are deterministic regardless; this only gates any future use of
    parallel data plumbing.
    """
    return os.environ.get("STEREO_SEMISUP_DETERMINISTIC", "") == "1"
