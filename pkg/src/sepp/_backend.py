"""Select the compiled kernel core, falling back to numpy.

Set ``SEPP_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _pycore

if os.environ.get("SEPP_BACKEND", "").lower() == "python":
    core = _pycore
    BACKEND = "python"
else:
    try:
        from . import _core as core  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # extension not built
        core = _pycore
        BACKEND = "python"

__all__ = ["core", "BACKEND"]
