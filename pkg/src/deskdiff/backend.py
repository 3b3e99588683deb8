"""Build-wide numeric policy: float precision and the numba switch.

Precision defaults to float32 (training). Set ``DESKDIFF_PRECISION=64`` or call
:func:`set_precision` to run everything in float64, which the gradient checks
and oracle comparisons rely on.

Numba kernels are used when numba imports and ``DESKDIFF_DISABLE_NUMBA`` is
unset (or ``0``). Setting it to ``1`` selects the pure-numpy kernels.
"""

import contextlib
import os

import numpy as np

_PRECISIONS = {32: np.float32, 64: np.float64}


def _env_precision():
    raw = os.environ.get("DESKDIFF_PRECISION", "32").strip()
    try:
        bits = int(raw)
    except ValueError:
        raise ValueError(f"DESKDIFF_PRECISION must be 32 or 64, got {raw!r}") from None
    if bits not in _PRECISIONS:
        raise ValueError(f"DESKDIFF_PRECISION must be 32 or 64, got {bits}")
    return _PRECISIONS[bits]


_dtype = _env_precision()


def get_dtype():
    return _dtype


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype = _PRECISIONS[bits]


def precision_bits() -> int:
    return 64 if _dtype == np.float64 else 32


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the build-wide float precision."""
    old = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if old == np.float64 else 32)


def numba_requested() -> bool:
    return os.environ.get("DESKDIFF_DISABLE_NUMBA", "0").strip() in ("", "0", "false", "no")


try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and numba_requested()
