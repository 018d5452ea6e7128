"""Backend selection for the numerical kernels.

The compiled extension is preferred when it imported cleanly; the numpy
fallback is used otherwise. Setting FEDFAIR_PURE_PYTHON=1 in the environment
forces the fallback, which is how the cross-backend tests and benchmarks
drive both implementations.

All results are deterministic within a backend. The two backends agree to
within a few ulps but not bitwise, so anything that persists or compares
trajectories byte-for-byte must stay on a single backend (the run manifest
records which one was active).
"""

import os

from fedfair.kernels import pure

if os.environ.get("FEDFAIR_PURE_PYTHON") == "1":
    _impl = pure
else:
    try:
        from fedfair.kernels import _speedups as _impl
    except ImportError:
        _impl = pure

BACKEND = _impl.BACKEND_NAME

quad_gradient = _impl.quad_gradient
quad_local_sgd = _impl.quad_local_sgd
logistic_batch_gradient = _impl.logistic_batch_gradient
logistic_local_sgd = _impl.logistic_local_sgd
