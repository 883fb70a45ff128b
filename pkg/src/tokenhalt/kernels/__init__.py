"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Everything here is row-oriented: softmax and layernorm operate on 2D
arrays (rows x features), elementwise kernels accept any contiguous
array. The autodiff engine reshapes to 2D before calling in.

Backend selection: set ``TOKENHALT_KERNELS=numpy`` to force the numpy
fallback, ``TOKENHALT_KERNELS=numba`` to require numba (import error if
unavailable). Default is numba when importable, numpy otherwise. The
active backend is exposed as ``BACKEND``.

Both backends compute the same formulas; they may differ by float
rounding only (summation order). See benchmarks/bench_kernels.py for a
side-by-side timing comparison.
"""

import os

from . import numpy_backend

_requested = os.environ.get("TOKENHALT_KERNELS", "").strip().lower()

if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        f"TOKENHALT_KERNELS must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_backend
    BACKEND = "numpy"
elif _requested == "numba":
    from . import numba_backend as _impl

    BACKEND = "numba"
else:
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"

sigmoid_fwd = _impl.sigmoid_fwd
sigmoid_bwd = _impl.sigmoid_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_masked_fwd = _impl.softmax_masked_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
