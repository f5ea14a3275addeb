"""Select the compiled row kernels when available, numpy otherwise.

Set ``CONCEPTFUSE_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CONCEPTFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
