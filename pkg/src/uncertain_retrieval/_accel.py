"""Numba switch.

Set ``UNCERTAIN_RETRIEVAL_NUMBA=0`` to force the pure-numpy kernels.
"""
import os

_flag = os.environ.get("UNCERTAIN_RETRIEVAL_NUMBA", "1").strip().lower()

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _flag not in ("0", "false", "no", "off")

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}

