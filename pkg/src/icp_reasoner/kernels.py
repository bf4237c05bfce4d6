"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
versions are used. Set ``ICP_REASONER_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("ICP_REASONER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

nearest_neighbors = _impl.nearest_neighbors
max_argmax = _impl.max_argmax
scatter_argmax = _impl.scatter_argmax

__all__ = ["BACKEND", "nearest_neighbors", "max_argmax", "scatter_argmax"]
