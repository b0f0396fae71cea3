"""Small numpy convnet with hand-written backward passes.

Arrays are plain ``np.ndarray`` in ``(C, H, W)`` layout.  A network is a
stride-``2**L`` backbone of ``L`` conv+ReLU layers, a 3x3 sliding-window conv,
and sibling 1x1 convs for objectness logits and (RPN only) box offsets.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import _backend
from .config import NetConfig

CHECKPOINT_MAGIC = b"NRPNCKPT"
CHECKPOINT_VERSION = 1
_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def conv_output_size(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    return oh, ow


def _check_conv(x, w, b):
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"expected input (C,H,W) and weights (K,C,kh,kw), got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"input has {x.shape[0]} channels but weights expect {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} filters")


def conv2d_forward(x, w, b, stride=1, pad=0, return_cols=False):
    """Zero-padded cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, w, b)
    k, c, kh, kw = w.shape
    oh, ow = conv_output_size(x.shape[1], x.shape[2], kh, kw, stride, pad)
    cols = _backend.im2col(x, kh, kw, stride, pad)
    out = w.reshape(k, -1) @ cols
    if b is not None:
        out += b[:, None]
    out = out.reshape(k, oh, ow)
    return (out, cols) if return_cols else out


def conv2d_backward(grad_out, x, w, stride=1, pad=0, cols=None):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, w, None)
    k, c, kh, kw = w.shape
    oh, ow = conv_output_size(x.shape[1], x.shape[2], kh, kw, stride, pad)
    if grad_out.shape != (k, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {(k, oh, ow)}")
    if cols is None:
        cols = _backend.im2col(x, kh, kw, stride, pad)
    g = grad_out.reshape(k, -1)
    grad_w = (g @ cols.T).reshape(w.shape)
    grad_b = g.sum(axis=1)
    grad_cols = w.reshape(k, -1).T @ g
    grad_x = _backend.col2im(grad_cols, c, x.shape[1], x.shape[2], kh, kw, stride, pad)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, x):
    return grad * (x > 0)


def sigmoid_forward(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep scores strictly inside (0, 1) even when the logit saturates
    return np.clip(y, _TINY, _ONE_MINUS)


def sigmoid_backward(grad, y):
    """``y`` is the sigmoid output."""
    return grad * y * (1.0 - y)


@dataclass
class HeadOutput:
    logits: np.ndarray
    score_map: np.ndarray
    reg_map: np.ndarray | None

    def scores(self) -> np.ndarray:
        """Per-anchor scores in anchor order (y, x, anchor-type)."""
        return self.score_map.transpose(1, 2, 0).reshape(-1)

    def deltas(self) -> np.ndarray:
        """Per-anchor ``(tx, ty, tw, th)`` in anchor order."""
        a = self.score_map.shape[0]
        h, w = self.reg_map.shape[1:]
        return self.reg_map.reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


class ProposalNet:
    """RPN (``with_regression=True``) or nRPN (scores only).

    ``params`` and ``grads`` are ordered name -> array dicts; two instances
    never share buffers.
    """

    def __init__(self, cfg: NetConfig, num_anchors: int, with_regression: bool, rng: np.random.Generator):
        self.cfg = cfg
        self.num_anchors = int(num_anchors)
        self.with_regression = with_regression
        self.layers = []  # (name, stride, pad, relu)
        shapes = {}
        c_in = cfg.in_channels
        for i, (c, k) in enumerate(zip(cfg.channels, cfg.kernels)):
            shapes[f"conv{i + 1}"] = (c, c_in, k, k)
            self.layers.append((f"conv{i + 1}", 2, k // 2, True))
            c_in = c
        shapes["head"] = (cfg.head_channels, c_in, cfg.head_kernel, cfg.head_kernel)
        self.layers.append(("head", 1, cfg.head_kernel // 2, True))
        shapes["cls"] = (self.num_anchors, cfg.head_channels, 1, 1)
        if with_regression:
            shapes["reg"] = (4 * self.num_anchors, cfg.head_channels, 1, 1)

        self.params = {}
        for name, shape in shapes.items():
            fan_in = shape[1] * shape[2] * shape[3]
            gain = 2.0 if name not in ("cls", "reg") else 1.0
            self.params[f"{name}.w"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
            self.params[f"{name}.b"] = np.zeros(shape[0])
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def forward(self, image) -> HeadOutput:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected image shape ({self.cfg.in_channels}, H, W), got {image.shape}")
        if image.shape[1] % self.stride or image.shape[2] % self.stride:
            raise ValueError(f"image size {image.shape[1:]} is not divisible by stride {self.stride}")
        p = self.params
        x = image - 0.5
        cache = []
        for name, stride, pad, _ in self.layers:
            z, cols = conv2d_forward(x, p[f"{name}.w"], p[f"{name}.b"], stride, pad, return_cols=True)
            cache.append((name, stride, pad, x, cols, z))
            x = relu_forward(z)
        feat = x
        logits, cls_cols = conv2d_forward(feat, p["cls.w"], p["cls.b"], 1, 0, return_cols=True)
        reg = None
        if self.with_regression:
            reg = conv2d_forward(feat, p["reg.w"], p["reg.b"], 1, 0)
        self._cache = (cache, feat, cls_cols)
        return HeadOutput(logits, sigmoid_forward(logits), reg)

    def backward(self, grad_logits, grad_reg=None):
        """Accumulate parameter gradients for the last :meth:`forward` call."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache, feat, cls_cols = self._cache
        p, g = self.params, self.grads
        gf, gw, gb = conv2d_backward(grad_logits, feat, p["cls.w"], 1, 0, cols=cls_cols)
        g["cls.w"] += gw
        g["cls.b"] += gb
        if self.with_regression and grad_reg is not None:
            gf2, gw, gb = conv2d_backward(grad_reg, feat, p["reg.w"], 1, 0, cols=cls_cols)
            gf = gf + gf2
            g["reg.w"] += gw
            g["reg.b"] += gb
        grad = gf
        for name, stride, pad, x, cols, z in reversed(cache):
            grad = relu_backward(grad, z)
            grad, gw, gb = conv2d_backward(grad, x, p[f"{name}.w"], stride, pad, cols=cols)
            g[f"{name}.w"] += gw
            g[f"{name}.b"] += gb
        return grad

    def zero_grad(self):
        for v in self.grads.values():
            v.fill(0.0)

    def scores_to_map_grad(self, grad_scores_flat, output: HeadOutput):
        """Chain a per-anchor gradient w.r.t. sigmoid scores back to logit-map layout."""
        a, h, w = output.score_map.shape
        gmap = np.asarray(grad_scores_flat).reshape(h, w, a).transpose(2, 0, 1)
        return sigmoid_backward(gmap, output.score_map)

    def deltas_to_map_grad(self, grad_deltas, output: HeadOutput):
        a, h, w = output.score_map.shape
        return np.asarray(grad_deltas).reshape(h, w, a, 4).transpose(2, 3, 0, 1).reshape(4 * a, h, w)


def forward_rpn(net: ProposalNet, image) -> HeadOutput:
    if not net.with_regression:
        raise ValueError("forward_rpn needs a network with a regression head")
    return net.forward(image)


def forward_nrpn(net: ProposalNet, image) -> HeadOutput:
    if net.with_regression:
        raise ValueError("forward_nrpn needs a score-only network")
    return net.forward(image)


class SGD:
    """Momentum SGD: ``v = momentum * v + grad; w -= lr * v``."""

    def __init__(self, net: ProposalNet, lr: float, momentum: float = 0.0):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in net.params.items()}

    def step(self):
        for k, w in self.net.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += self.net.grads[k]
            w -= self.lr * v
        self.net.zero_grad()


def sgd_step(net: ProposalNet, lr: float, momentum: float, velocity: dict | None = None) -> dict:
    """Functional form of :class:`SGD`; returns the (updated) velocity dict."""
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    opt = SGD(net, lr, momentum)
    opt.velocity = velocity
    opt.step()
    return velocity


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, net: ProposalNet, meta: dict):
    """Binary checkpoint: magic, JSON header line, raw little-endian float64 tensors."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net, meta))


def checkpoint_bytes(net: ProposalNet, meta: dict) -> bytes:
    names = list(net.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": "rpn" if net.with_regression else "nrpn",
        "num_anchors": net.num_anchors,
        "net": {
            "in_channels": net.cfg.in_channels,
            "channels": list(net.cfg.channels),
            "kernels": list(net.cfg.kernels),
            "head_channels": net.cfg.head_channels,
            "head_kernel": net.cfg.head_kernel,
        },
        "tensors": [{"name": n, "shape": list(net.params[n].shape)} for n in names],
        "meta": meta,
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    for n in names:
        buf.write(np.ascontiguousarray(net.params[n], dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> tuple[ProposalNet, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", data[off : off + 4])
    off += 4
    header = json.loads(data[off : off + n])
    off += n
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    net = ProposalNet(NetConfig(**header["net"]), header["num_anchors"], header["kind"] == "rpn", np.random.default_rng(0))
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[off : off + size], dtype="<f8").reshape(shape).astype(np.float64)
        off += size
        if net.params[t["name"]].shape != shape:
            raise ValueError(f"{path}: tensor {t['name']} has shape {shape}, expected {net.params[t['name']].shape}")
        net.params[t["name"]] = arr
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after tensors")
    net.grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    return net, header["meta"]


def params_digest(net: ProposalNet) -> str:
    h = hashlib.sha256()
    for k, v in net.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()
