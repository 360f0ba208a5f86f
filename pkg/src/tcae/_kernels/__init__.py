"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from the ``TCAE_NUMBA`` environment
variable: ``0``/``off``/``false`` forces numpy, anything else (or unset) uses
numba when it can be imported.

Under the numba backend GELU still dispatches to numpy: without SVML, numba's
scalar tanh loop runs about 10x slower than numpy's SIMD ufunc (see
benchmarks/bench_kernels.py). Softmax forward splits the difference: numba does
the row passes and numpy does the exp.
"""

import importlib
import os

from . import numpy_impl

_flag = os.environ.get("TCAE_NUMBA", "1").strip().lower()
_want_numba = _flag not in {"0", "off", "false", "no"}

numba_impl = None
if _want_numba:
    try:
        numba_impl = importlib.import_module(".numba_impl", __name__)
    except ImportError:  # numba missing: fall back silently
        numba_impl = None

backend = numba_impl if numba_impl is not None else numpy_impl
BACKEND_NAME = "numba" if numba_impl is not None else "numpy"

gelu_fwd = numpy_impl.gelu_fwd
gelu_bwd = numpy_impl.gelu_bwd
layernorm_fwd = backend.layernorm_fwd
layernorm_bwd = backend.layernorm_bwd
softmax_fwd = backend.softmax_fwd
softmax_bwd = backend.softmax_bwd
im2col = backend.im2col
col2im = backend.col2im
bilinear_sample = backend.bilinear_sample

__all__ = [
    "BACKEND_NAME",
    "gelu_fwd",
    "gelu_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "im2col",
    "col2im",
    "bilinear_sample",
    "numpy_impl",
    "numba_impl",
]
