"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy module ``_core_py``.  Set ``DPMCMC_PURE_PYTHON=1`` to force the
fallback.  The extension handles scalar observations with Markov or
Polya-urn transitions; anything else always runs on the fallback.
"""

import os

from . import _core_py
from .model import GENERIC

core = _core_py
BACKEND = "python"

if os.environ.get("DPMCMC_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _core as core  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        pass


def kernels_for(tables):
    """Kernel module able to handle the given model tables."""
    if tables.y_dim != 1 or tables.trans_kind == GENERIC:
        return _core_py
    return core
