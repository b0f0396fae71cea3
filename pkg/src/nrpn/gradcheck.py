"""Finite-difference checks for every analytic gradient in the training path."""
from __future__ import annotations

import numpy as np

from .config import LabelConfig, LossConfig, TrainConfig
from .labeling import assign_rpn_base_labels
from .losses import GradCheckReport, bce_loss, finite_diff_check, overlap_loss, relative_error, smooth_l1

LOSS_STEP = 1e-5
NET_STEP = 1e-4


def _overlap_points(rng, n):
    pts = []
    while len(pts) < n:
        iou = rng.uniform(0.1, 1.0)
        p = rng.uniform(0.01, 0.99)
        y = int(rng.integers(0, 2))
        # the positive branch has a kink at p == iou
        if y == 1 and abs(p - iou) < 1e-3:
            continue
        pts.append((p, y, iou))
    return pts


def check_overlap(samples=200, tol=1e-4, seed=0, cfg: LossConfig | None = None) -> GradCheckReport:
    cfg = cfg or LossConfig()
    worst, worst_x = 0.0, None
    for p, y, iou in _overlap_points(np.random.default_rng([seed, 11]), samples):
        def f(x, y=y, iou=iou):
            r = overlap_loss(x, y, iou, cfg)
            return r.value, r.grad

        rep = finite_diff_check(f, [p], LOSS_STEP, tol)
        if worst_x is None or rep.max_rel_error > worst:
            worst, worst_x = rep.max_rel_error, (p, y, iou)
    return GradCheckReport("overlap_loss", samples, worst, worst_x, tol)


def check_bce(samples=200, tol=1e-4, seed=0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 12])
    worst, worst_x = 0.0, None
    for _ in range(samples):
        p, y = rng.uniform(0.01, 0.99), int(rng.integers(0, 2))

        def f(x, y=y):
            r = bce_loss(x, y)
            return r.value, r.grad

        rep = finite_diff_check(f, [p], LOSS_STEP, tol)
        if worst_x is None or rep.max_rel_error > worst:
            worst, worst_x = rep.max_rel_error, (p, y)
    return GradCheckReport("bce_loss", samples, worst, worst_x, tol)


def check_smooth_l1(samples=200, tol=1e-4, seed=0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 13])
    inputs = []
    while len(inputs) < samples:
        t, ts = rng.uniform(-3, 3, 4), rng.uniform(-1, 1, 4)
        if np.all(np.abs(np.abs(t - ts) - 1.0) > 1e-3):
            inputs.append((t, ts))
    worst, worst_x = 0.0, None
    for t, ts in inputs:
        def f(x, ts=ts):
            r = smooth_l1(x, ts)
            return r.value, r.grad

        rep = finite_diff_check(f, [t], LOSS_STEP, tol)
        if worst_x is None or rep.max_rel_error > worst:
            worst, worst_x = rep.max_rel_error, (t.tolist(), ts.tolist())
    return GradCheckReport("smooth_l1", samples, worst, worst_x, tol)


def tiny_problem(seed=0):
    """One stride-2 conv plus the head on a 16x16 image with two objects."""
    from .nn import ProposalNet
    from .training import anchors_for

    d = TrainConfig().to_dict()
    d["net"] = dict(in_channels=1, channels=[3], kernels=[3], head_channels=5, head_kernel=3)
    d["anchors"] = dict(stride=2, scales=[4.0, 8.0], ratios=[1.0])
    cfg = TrainConfig.from_dict(d).validate()
    rng = np.random.default_rng([seed, 14])
    net = ProposalNet(cfg.net, cfg.anchors.num_per_cell, True, rng)
    image = rng.random((1, 16, 16))
    anchors = anchors_for(cfg, 16, 16)
    gts = np.array([[2.0, 3.0, 9.0, 10.0], [8.0, 8.0, 15.0, 13.0]])
    labels = assign_rpn_base_labels(anchors, gts, LabelConfig(num_neg=20), rng)
    return cfg, net, image, anchors, gts, labels


def check_end_to_end(samples=200, tol=1e-3, seed=0, overlap=True) -> GradCheckReport:
    """Every parameter of a small network under the full detection loss.

    Problems with fresh seeds are added until at least ``samples`` scalar
    parameters have been checked.
    """
    from .training import rpn_loss

    worst, worst_x, n, k = 0.0, None, 0, 0
    while n < samples:
        cfg, net, image, anchors, gts, labels = tiny_problem(seed + k)

        def loss_value():
            return rpn_loss(net, net.forward(image), anchors, labels, gts, cfg, overlap)[0].value

        net.zero_grad()
        _, gl, gr = rpn_loss(net, net.forward(image), anchors, labels, gts, cfg, overlap)
        net.backward(gl, gr)
        for name, p in net.params.items():
            flat = p.reshape(-1)
            numeric = np.zeros(flat.size)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + NET_STEP
                fp = loss_value()
                flat[i] = old - NET_STEP
                fm = loss_value()
                flat[i] = old
                numeric[i] = (fp - fm) / (2 * NET_STEP)
            err = relative_error(net.grads[name].reshape(-1), numeric)
            i = int(np.argmax(err))
            if worst_x is None or err[i] > worst:
                worst, worst_x = float(err[i]), f"seed {seed + k} {name}[{i}]"
            n += flat.size
        k += 1
    return GradCheckReport("end_to_end", n, worst, worst_x, tol)


def run_all(samples=200, tol=1e-4, seed=0, end_to_end_tol=1e-3):
    return [
        check_overlap(samples, tol, seed),
        check_bce(samples, tol, seed),
        check_smooth_l1(samples, tol, seed),
        check_end_to_end(samples, end_to_end_tol, seed),
    ]
