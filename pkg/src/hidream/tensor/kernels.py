"""Backend selection for the convolution data-movement kernels.

The compiled extension is used when it imports; set ``HIDREAM_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
im2col3x3 = _kernels_py.im2col3x3
col2im3x3 = _kernels_py.col2im3x3

if not os.environ.get("HIDREAM_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        im2col3x3 = _ckernels.im2col3x3
        col2im3x3 = _ckernels.col2im3x3
        BACKEND = "cython"
