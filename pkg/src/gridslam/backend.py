"""Kernel backend selection.

The hot numeric kernels exist twice: a numba-compiled version and a pure
numpy fallback with identical semantics. The environment variable
``GRIDSLAM_BACKEND`` picks one at import time:

* ``auto`` (default): numba if it imports cleanly, else numpy.
* ``numba``: require numba, raise if it is unavailable.
* ``numpy``: force the fallback even when numba is installed.
"""

import os

_ENV_VAR = "GRIDSLAM_BACKEND"
_VALID = ("auto", "numba", "numpy")


def requested_backend() -> str:
    """Return the backend named by the environment, defaulting to auto."""
    name = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if name not in _VALID:
        raise ValueError(
            f"{_ENV_VAR} must be one of {_VALID}, got {name!r}"
        )
    return name


def resolve_backend() -> str:
    """Decide which kernel implementation to load ('numba' or 'numpy')."""
    name = requested_backend()
    if name == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if name == "numba":
            raise ImportError(
                f"{_ENV_VAR}=numba but numba is not importable"
            )
        return "numpy"
