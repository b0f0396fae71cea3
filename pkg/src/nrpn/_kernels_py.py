"""Numpy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable.  Arithmetic is
ordered exactly like the Cython loops so the two backends agree bit for bit.
"""
import numpy as np


def iou_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    np.maximum(iw, 0.0, out=iw)
    np.maximum(ih, 0.0, out=ih)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    pos = union > 0.0
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=pos)
    return out


def nms_sorted(boxes, threshold, max_out):
    """Greedy suppression over boxes already sorted by descending score.

    Returns positions (into ``boxes``) of the kept entries.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    if max_out <= 0 or len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.arange(len(boxes))
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        if len(keep) >= max_out:
            break
        rest = order[1:]
        ovr = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[ovr <= threshold]
    return np.asarray(keep, dtype=np.int64)


def _out_size(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def im2col(x, kh, kw, stride, pad):
    c_in, h, w = x.shape
    oh, ow = _out_size(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c_in, kh, kw, oh, ow), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols.reshape(c_in * kh * kw, oh * ow)


def col2im(cols, c_in, h, w, kh, kw, stride, pad):
    oh, ow = _out_size(h, w, kh, kw, stride, pad)
    cols = cols.reshape(c_in, kh, kw, oh, ow)
    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[:, ki, kj]
    return xp[:, pad : pad + h, pad : pad + w].copy()
