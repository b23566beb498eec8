"""Token kernels used by the prefix cache.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``AGENTSERVE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("AGENTSERVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

block_keys = _impl.block_keys
common_prefix_len = _impl.common_prefix_len

__all__ = ["BACKEND", "block_keys", "common_prefix_len"]
