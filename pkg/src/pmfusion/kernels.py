"""Hot-kernel dispatch: compiled extension when built, numpy otherwise.

Set ``PMF_PURE_PYTHON=1`` before import to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PMF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

out_size = _kernels_py.out_size


def im2col(x, kh, kw, stride, pad, dil):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad, dil)


def col2im(cols, shape, kh, kw, stride, pad, dil):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(shape),
                        kh, kw, stride, pad, dil)


def maxpool2(x):
    return _impl.maxpool2(np.ascontiguousarray(x, dtype=np.float64))


def zbuffer(pix, depth, H, W):
    return _impl.zbuffer(np.ascontiguousarray(pix, dtype=np.int64),
                         np.ascontiguousarray(depth, dtype=np.float64), H, W)
