"""Hot-loop kernels: the compiled extension when available, numpy otherwise.

Set ``WSCBIAS_PURE_PYTHON=1`` to force the numpy versions.
"""

import os

from . import _fallback

BACKEND = "python"
greedy_match = _fallback.greedy_match

if not os.environ.get("WSCBIAS_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        greedy_match = _kernels.greedy_match
        BACKEND = "compiled"

__all__ = ["BACKEND", "greedy_match"]
