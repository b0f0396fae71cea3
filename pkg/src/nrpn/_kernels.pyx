# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: pairwise IoU, greedy NMS, im2col and col2im.

Every routine mirrors ``nrpn._kernels_py`` operation for operation so both
backends return bit-identical arrays.
"""
import numpy as np


cdef inline double _pair_iou(double ax1, double ay1, double ax2, double ay2,
                             double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    if iw < 0.0:
        iw = 0.0
    if ih < 0.0:
        ih = 0.0
    cdef double inter = iw * ih
    cdef double union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union > 0.0:
        return inter / union
    return 0.0


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _pair_iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                                    b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


def nms_sorted(const double[:, ::1] boxes, double threshold, Py_ssize_t max_out):
    cdef Py_ssize_t n = boxes.shape[0], i, j, nk = 0
    if max_out <= 0 or n == 0:
        return np.zeros(0, dtype=np.int64)
    keep = np.zeros(min(n, max_out), dtype=np.int64)
    cdef long long[::1] k = keep
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    with nogil:
        for i in range(n):
            if suppressed[i]:
                continue
            k[nk] = i
            nk += 1
            if nk >= max_out:
                break
            for j in range(i + 1, n):
                if suppressed[j]:
                    continue
                if _pair_iou(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                             boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3]) > threshold:
                    suppressed[j] = 1
    return keep[:nk]


def im2col(const double[:, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t c, ki, kj, oy, ox, iy, ix, row
    cols = np.zeros((c_in * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, ::1] out = cols
    with nogil:
        for c in range(c_in):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for oy in range(oh):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + kj - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[row, oy * ow + ox] = x[c, iy, ix]
    return cols


def col2im(const double[:, ::1] cols, int c_in, int h, int w, int kh, int kw,
           int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t c, ki, kj, oy, ox, iy, ix, row
    img = np.zeros((c_in, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = img
    with nogil:
        for c in range(c_in):
            for ki in range(kh):
                for kj in range(kw):
                    row = (c * kh + ki) * kw + kj
                    for oy in range(oh):
                        iy = oy * stride + ki - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + kj - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[c, iy, ix] += cols[row, oy * ow + ox]
    return img
