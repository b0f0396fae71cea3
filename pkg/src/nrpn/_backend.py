"""Pick the kernel backend once, at import time.

The compiled ``nrpn._kernels`` module is preferred.  Setting the environment
variable ``NRPN_BACKEND=python`` forces the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as compiled_kernels
except ImportError:
    compiled_kernels = None

python_kernels = _kernels_py

if os.environ.get("NRPN_BACKEND", "").lower() == "python" or compiled_kernels is None:
    kernels = python_kernels
    BACKEND = "python"
else:
    kernels = compiled_kernels
    BACKEND = "cython"


def _boxes(a):
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)


def iou_matrix(a, b):
    return kernels.iou_matrix(_boxes(a), _boxes(b))


def nms_sorted(boxes, threshold, max_out):
    return kernels.nms_sorted(_boxes(boxes), float(threshold), int(max_out))


def im2col(x, kh, kw, stride, pad):
    return kernels.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, c_in, h, w, kh, kw, stride, pad):
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    return kernels.col2im(cols, c_in, h, w, kh, kw, stride, pad)
