"""Backend selection for the hot tabular kernels.

The compiled Cython module is used when it was built; otherwise the NumPy
fallback is imported. Setting ``SCPO_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

if os.environ.get("SCPO_PURE_PYTHON", "") not in ("", "0"):
    from scpo import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from scpo import _ckernels as _impl
    except ImportError:
        from scpo import _pykernels as _impl

        BACKEND = "python"
    else:
        BACKEND = "cython"

ball_min = _impl.ball_min
lagrangian_min = _impl.lagrangian_min

__all__ = ["BACKEND", "ball_min", "lagrangian_min"]
