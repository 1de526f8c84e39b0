"""Selection kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; setting
``PLACERANK_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _topk_py

BACKEND = "python"
_compiled = None

if os.environ.get("PLACERANK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _topk as _compiled  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _compiled = None


def topk_rows(scores, k, ascending=False, backend=None):
    """Indices of the ``k`` best entries of each row, best first.

    Descending by default. Equal scores rank by lower column index, so the
    result matches a stable full sort.
    """
    scores = np.asarray(scores)
    if scores.ndim == 1:
        return topk_rows(scores[None, :], k, ascending, backend)[0]
    if scores.ndim != 2:
        raise ValueError(f"expected a 2-d score array, got shape {scores.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    use = backend or BACKEND
    if use == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        if scores.dtype not in (np.float32, np.float64):
            scores = scores.astype(np.float64)
        return _compiled.topk_rows(np.ascontiguousarray(scores), int(k), bool(ascending))
    return _topk_py.topk_rows(scores, k, ascending)
