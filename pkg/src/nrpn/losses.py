"""Classification and regression losses with analytic gradients.

The overlap loss credits a foreground anchor's score relative to the anchor's
IoU with its ground truth instead of relative to 1: the ratio ``p / iou`` is
used in place of ``p`` and capped at 1, so any score at or above the IoU
costs nothing.  Background anchors use ``-ln(1 - p)``.

Vectorised ``*_terms`` functions return ``(values, grads)`` arrays and are
what training uses; the scalar wrappers validate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import LossConfig

DEFAULT = LossConfig()


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: object


@dataclass(frozen=True)
class TotalLoss:
    value: float
    cls_value: float
    reg_value: float
    grad_p: np.ndarray
    grad_t: np.ndarray


def _check_cls(p, p_star, iou=None):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {p}")
    if p_star not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {p_star}")
    if iou is not None and p_star == 1 and not 0.0 < iou <= 1.0:
        raise ValueError(f"foreground IoU must lie in (0, 1], got {iou}")


def overlap_terms(p, p_star, iou, cfg: LossConfig = DEFAULT):
    p = np.asarray(p, dtype=np.float64)
    pos = np.asarray(p_star) == 1
    iou = np.where(pos, np.asarray(iou, dtype=np.float64), 1.0)
    eps = cfg.eps_clamp

    ratio = p / iou
    q_pos = np.clip(ratio, eps, 1.0)
    g_pos = np.where((ratio > eps) & (ratio < 1.0), -1.0 / (q_pos * iou), 0.0)

    if cfg.literal_negative:
        q_neg = np.maximum(p, eps)
        g_neg = np.where(p > eps, -1.0 / q_neg, 0.0)
    else:
        one_minus = 1.0 - p
        q_neg = np.maximum(one_minus, eps)
        g_neg = np.where(one_minus > eps, 1.0 / q_neg, 0.0)

    values = -np.log(np.where(pos, q_pos, q_neg))
    grads = np.where(pos, g_pos, g_neg)
    return values, grads


def bce_terms(p, p_star, cfg: LossConfig = DEFAULT):
    p = np.asarray(p, dtype=np.float64)
    pos = np.asarray(p_star) == 1
    eps = cfg.eps_clamp
    one_minus = 1.0 - p
    values = np.where(pos, -np.log(np.maximum(p, eps)), -np.log(np.maximum(one_minus, eps)))
    grads = np.where(
        pos,
        np.where(p > eps, -1.0 / np.maximum(p, eps), 0.0),
        np.where(one_minus > eps, 1.0 / np.maximum(one_minus, eps), 0.0),
    )
    return values, grads


def smooth_l1_terms(d):
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    quad = a < 1.0
    values = np.where(quad, 0.5 * d * d, a - 0.5)
    grads = np.where(quad, d, np.sign(d))
    return values, grads


def overlap_loss(p: float, p_star: int, iou: float, cfg: LossConfig = DEFAULT) -> LossValue:
    _check_cls(p, p_star, iou)
    v, g = overlap_terms(p, p_star, iou, cfg)
    return LossValue(float(v), float(g))


def bce_loss(p: float, p_star: int, cfg: LossConfig = DEFAULT) -> LossValue:
    _check_cls(p, p_star)
    v, g = bce_terms(p, p_star, cfg)
    return LossValue(float(v), float(g))


def smooth_l1(t: Sequence[float], t_star: Sequence[float]) -> LossValue:
    """Summed over the four offsets; ``grad`` is with respect to ``t``."""
    v, g = smooth_l1_terms(np.asarray(t, dtype=np.float64) - np.asarray(t_star, dtype=np.float64))
    return LossValue(float(v.sum()), g)


def total_loss(p, p_star, iou, t=None, t_star=None, cfg: LossConfig = DEFAULT, overlap: bool = True) -> TotalLoss:
    """Mean classification loss plus ``lambda``-weighted mean smooth-L1.

    ``p``, ``p_star`` and ``iou`` are aligned per labelled anchor; ``t`` and
    ``t_star`` are ``(n_fg, 4)`` predicted and target offsets.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("total_loss needs at least one classification term")
    if overlap:
        cv, cg = overlap_terms(p, p_star, iou, cfg)
    else:
        cv, cg = bce_terms(p, p_star, cfg)
    n_cls = p.size if cfg.n_cls_mode == "count" else 1

    if t is None or len(t) == 0:
        t = np.zeros((0, 4))
        rv = np.zeros((0, 4))
        rg = np.zeros((0, 4))
    else:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
        rv, rg = smooth_l1_terms(t - np.asarray(t_star, dtype=np.float64).reshape(-1, 4))
    n_reg = max(len(t), 1) if cfg.n_reg_mode == "count" else 1

    cls_value = float(cv.sum()) / n_cls
    reg_value = float(rv.sum()) / n_reg
    lam = cfg.lambda_balance
    return TotalLoss(
        value=cls_value + lam * reg_value,
        cls_value=cls_value,
        reg_value=reg_value,
        grad_p=cg / n_cls,
        grad_t=(lam / n_reg) * rg,
    )


def total_loss_terms(cls_terms, reg_terms=(), cfg: LossConfig = DEFAULT, overlap: bool = True) -> TotalLoss:
    """:func:`total_loss` over ``[(p, p_star, iou), ...]`` and ``[(t, t_star), ...]`` lists."""
    if not cls_terms:
        raise ValueError("total_loss needs at least one classification term")
    p, p_star, iou = (np.array(c, dtype=np.float64) for c in zip(*cls_terms))
    for pi, si, ii in zip(p, p_star, iou):
        _check_cls(pi, int(si), ii if overlap else None)
    if reg_terms:
        t, t_star = (np.array(r, dtype=np.float64) for r in zip(*reg_terms))
    else:
        t = t_star = None
    return total_loss(p, p_star.astype(int), iou, t, t_star, cfg, overlap)


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    n_checked: int
    max_rel_error: float
    worst_input: object
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: {self.n_checked} points, max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(
    loss_fn: Callable,
    inputs,
    step: float = 1e-5,
    tol: float = 1e-4,
    name: str = "loss",
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(x)`` returns ``(value, grad)`` for a float or array ``x``.
    """
    worst, worst_x, n = 0.0, None, 0
    for x in inputs:
        x = np.array(x, dtype=np.float64)
        _, analytic = loss_fn(x.copy() if x.ndim else float(x))
        analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
        numeric = np.zeros_like(x)
        flat, nflat = x.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = loss_fn(x.copy() if x.ndim else float(x))[0]
            flat[i] = old - step
            fm = loss_fn(x.copy() if x.ndim else float(x))[0]
            flat[i] = old
            nflat[i] = (fp - fm) / (2.0 * step)
        err = float(np.max(relative_error(analytic, numeric))) if x.size else 0.0
        n += 1
        if err > worst or worst_x is None:
            worst, worst_x = err, x.tolist()
    return GradCheckReport(name, n, worst, worst_x, tol)
