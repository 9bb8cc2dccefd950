"""Scheduler kernel selection.

The compiled kernel is used when it was built and ``EDERA_PURE_PYTHON`` is
unset; otherwise the pure-Python kernel runs. Both produce identical output.
"""

from __future__ import annotations

import os

from . import _sched_py

try:
    if os.environ.get("EDERA_PURE_PYTHON"):
        raise ImportError("pure python forced")
    from . import _sched_ext as _kernel  # type: ignore[attr-defined]

    BACKEND = "cython"
except ImportError:
    _kernel = _sched_py
    BACKEND = "python"

share_ticks = _kernel.share_ticks
share_ticks_py = _sched_py.share_ticks

__all__ = ["BACKEND", "share_ticks", "share_ticks_py"]
