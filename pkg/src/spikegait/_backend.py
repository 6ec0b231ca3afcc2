"""Select the event-kernel backend at import time.

The compiled Cython module is used when it has been built; otherwise the
numpy fallback is used. Set ``SPIKEGAIT_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from spikegait import _kernels_py

logger = logging.getLogger(__name__)

_cy = None
if os.environ.get("SPIKEGAIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from spikegait import _kernels_cy as _cy
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _cy = None

kernels = _cy if _cy is not None else _kernels_py
BACKEND = "cython" if _cy is not None else "python"


def get_kernels(name=None):
    """Return a kernel module by name ("cython" or "python"); None gives the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _cy is not None:
            return _cy
        from spikegait import _kernels_cy

        return _kernels_cy
    raise ValueError(f"unknown backend {name!r}")


def has_compiled():
    try:
        get_kernels("cython")
    except ImportError:
        return False
    return True
