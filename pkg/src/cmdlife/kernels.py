"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``CMDLIFE_PURE=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("CMDLIFE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

window_stats = _impl.window_stats
draw_line = _impl.draw_line
max_concurrency = _impl.max_concurrency

__all__ = ["BACKEND", "window_stats", "draw_line", "max_concurrency"]
