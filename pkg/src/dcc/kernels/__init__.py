"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time. Set ``DCC_KERNELS=numpy`` to force
the fallback (numba is used by default when it imports cleanly). Both
backends expose the same functions with the same semantics; the test-suite
checks them against each other.
"""

import logging
import os

from . import _numpy

log = logging.getLogger(__name__)

_requested = os.environ.get("DCC_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"DCC_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

_jit = None
if _requested == "numba":
    try:
        from . import _numba as _jit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable, falling back to numpy kernels")

BACKEND = "numba" if _jit is not None else "numpy"
_impl = _jit if _jit is not None else _numpy

im2col = _impl.im2col
col2im = _impl.col2im
ball_pgd = _impl.ball_pgd

__all__ = ["BACKEND", "im2col", "col2im", "ball_pgd"]
