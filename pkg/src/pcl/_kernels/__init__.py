"""Hot-loop kernels with a compiled backend and a pure-Python fallback.

The compiled module is used when it was built and ``PCL_PURE_PYTHON`` is not
set to ``1``.  ``BACKEND`` names the active one.
"""
import os

from . import _pykernels

if os.environ.get("PCL_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

centroid_sums = _impl.centroid_sums
expected_mutual_info = _impl.expected_mutual_info
ross_counts = _impl.ross_counts

__all__ = ["BACKEND", "centroid_sums", "expected_mutual_info", "ross_counts"]
