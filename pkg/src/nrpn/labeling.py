"""Per-anchor training labels for the RPN and the negative RPN.

The two networks feed each other: RPN false positives become positives for
the nRPN, and the highest-scoring nRPN anchors become hard negatives for the
RPN.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .config import LabelConfig
from .geometry import AnchorSet, iou_matrix, score_order


class Role(IntEnum):
    IGNORE = 0
    FOREGROUND = 1
    HARD_NEGATIVE = 2
    EASY_NEGATIVE = 3


@dataclass(frozen=True)
class AnchorLabelSet:
    """Labels aligned with an :class:`AnchorSet`.

    ``matched_gt`` is -1 and ``matched_iou`` 0 for every non-foreground
    anchor.  ``max_iou`` is each anchor's best IoU over all ground truth.
    """

    roles: np.ndarray
    matched_gt: np.ndarray
    matched_iou: np.ndarray
    max_iou: np.ndarray

    def __len__(self):
        return len(self.roles)

    def indices(self, *roles: Role) -> np.ndarray:
        return np.flatnonzero(np.isin(self.roles, [int(r) for r in roles]))

    @property
    def foreground(self) -> np.ndarray:
        return self.indices(Role.FOREGROUND)

    @property
    def negatives(self) -> np.ndarray:
        return self.indices(Role.HARD_NEGATIVE, Role.EASY_NEGATIVE)

    @property
    def counts(self) -> dict:
        return {r.name.lower(): int(np.count_nonzero(self.roles == r)) for r in Role}

    @property
    def p_star(self) -> np.ndarray:
        return (self.roles == Role.FOREGROUND).astype(np.float64)


@dataclass(frozen=True)
class ExchangeBatch:
    rpn_fp_indices: np.ndarray
    nrpn_hard_indices: np.ndarray


def max_iou_per_anchor(anchors: AnchorSet, gts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (IoU matrix, best IoU per anchor, best GT per anchor)."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    if len(gts) == 0:
        n = len(boxes)
        return np.zeros((n, 0)), np.zeros(n), np.full(n, -1, dtype=np.int64)
    m = iou_matrix(boxes, gts)
    return m, m.max(axis=1), m.argmax(axis=1).astype(np.int64)


def _sample(rng: np.random.Generator, candidates: np.ndarray, k: int) -> np.ndarray:
    if k >= len(candidates):
        return candidates
    return np.sort(rng.choice(candidates, size=k, replace=False))


def assign_rpn_base_labels(anchors: AnchorSet, gts, cfg: LabelConfig, rng: np.random.Generator) -> AnchorLabelSet:
    """Foreground by IoU threshold plus the best anchor of every GT; random easy negatives."""
    n = len(anchors)
    if n == 0:
        raise ValueError("anchor set is empty")
    m, max_iou, argmax = max_iou_per_anchor(anchors, gts)
    roles = np.zeros(n, dtype=np.int8)
    matched_gt = np.full(n, -1, dtype=np.int64)
    matched_iou = np.zeros(n)

    fg = max_iou >= cfg.fg_iou
    matched_gt[fg] = argmax[fg]
    matched_iou[fg] = max_iou[fg]

    # every GT claims its own best anchor; later GTs skip anchors already claimed
    claimed = np.zeros(n, dtype=bool)
    for j in range(m.shape[1]):
        col = np.where(claimed, -1.0, m[:, j])
        k = int(np.argmax(col))
        if col[k] <= 0.0:
            continue
        claimed[k] = True
        fg[k] = True
        matched_gt[k] = j
        matched_iou[k] = m[k, j]
    roles[fg] = Role.FOREGROUND

    candidates = np.flatnonzero((max_iou < cfg.neg_iou) & ~fg)
    roles[_sample(rng, candidates, cfg.num_neg)] = Role.EASY_NEGATIVE
    return AnchorLabelSet(roles, matched_gt, matched_iou, max_iou)


def find_false_positives(labels: AnchorLabelSet, scores, cfg: LabelConfig) -> np.ndarray:
    """Anchors scored above ``fp_score`` whose best IoU is below ``neg_iou``.

    Anchors labelled foreground (via the best-anchor-per-GT rule) are never
    returned.  Output is in descending score order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(labels):
        raise ValueError("scores and labels are not aligned")
    hit = (scores > cfg.fp_score) & (labels.max_iou < cfg.neg_iou) & (labels.roles != Role.FOREGROUND)
    idx = np.flatnonzero(hit)
    return idx[score_order(scores[idx])]


def select_hard_negatives(nrpn_scores, anchors: AnchorSet, gts, k: int, cfg: LabelConfig, exclude=None) -> np.ndarray:
    """Top-``k`` nRPN anchors that do not overlap any GT by ``neg_iou`` or more."""
    nrpn_scores = np.asarray(nrpn_scores, dtype=np.float64)
    if len(nrpn_scores) != len(anchors):
        raise ValueError("scores and anchors are not aligned")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    _, max_iou, _ = max_iou_per_anchor(anchors, gts)
    ok = max_iou < cfg.neg_iou
    if exclude is not None:
        ok[np.asarray(exclude, dtype=np.int64)] = False
    idx = np.flatnonzero(ok)
    return idx[score_order(nrpn_scores[idx])][:k]


def build_nrpn_labels(fp_indices, anchors: AnchorSet, gts, cfg: LabelConfig, rng: np.random.Generator) -> AnchorLabelSet:
    """RPN false positives become nRPN foreground (IoU fixed at 1.0)."""
    n = len(anchors)
    fp = np.asarray(fp_indices, dtype=np.int64)
    _, max_iou, _ = max_iou_per_anchor(anchors, gts)
    roles = np.zeros(n, dtype=np.int8)
    matched_iou = np.zeros(n)
    roles[fp] = Role.FOREGROUND
    matched_iou[fp] = 1.0
    candidates = np.flatnonzero((max_iou < cfg.neg_iou) & (roles != Role.FOREGROUND))
    roles[_sample(rng, candidates, cfg.num_neg)] = Role.EASY_NEGATIVE
    return AnchorLabelSet(roles, np.full(n, -1, dtype=np.int64), matched_iou, max_iou)


def inject_hard_negatives(labels: AnchorLabelSet, hard_indices, cfg: LabelConfig, rng: np.random.Generator) -> AnchorLabelSet:
    """Mark ``hard_indices`` as hard negatives and trim easy negatives to keep ``num_neg`` in total."""
    hard = np.asarray(hard_indices, dtype=np.int64)
    roles = labels.roles.copy()
    if np.any(roles[hard] == Role.FOREGROUND):
        raise ValueError("a hard negative collides with an RPN foreground anchor")
    roles[hard] = Role.HARD_NEGATIVE
    easy = np.flatnonzero(roles == Role.EASY_NEGATIVE)
    budget = max(cfg.num_neg - len(hard), 0)
    if len(easy) > budget:
        keep = _sample(rng, easy, budget)
        roles[np.setdiff1d(easy, keep)] = Role.IGNORE
    return replace(labels, roles=roles)
