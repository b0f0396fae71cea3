"""Proposal recall at fixed proposal counts and IoU thresholds, split by object size."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import size_bucket_of_area
from .geometry import ProposalSet, iou_matrix

BUCKETS = ("S", "M", "L", "all")
REPORT_HEADER = ("model", "k", "iou", "bucket", "recall")
CURVE_HEADER = ("model", "series", "fixed", "x", "recall")
PROPOSAL_HEADER = ("image_id", "score", "x1", "y1", "x2", "y2")
DEFAULT_KS = (50, 100, 300)
DEFAULT_IOUS = (0.5, 0.7, 0.9)
CURVE_KS = (1, 2, 5, 10, 20, 50, 100, 200, 300)
CURVE_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def size_bucket(box) -> str:
    x1, y1, x2, y2 = (float(v) for v in box)
    return size_bucket_of_area((x2 - x1) * (y2 - y1))


def match_recall(proposals, gts, iou_t: float, k: int, exclusive: bool = False):
    """Hits among ``gts`` for the top-``k`` proposals (assumed score-sorted).

    By default one proposal may cover several GTs.  With ``exclusive`` each
    proposal is consumed by at most one GT: GTs are visited in order and take
    their best still-free proposal.
    Returns ``(hit_count, per_gt_flags)``.
    """
    boxes = proposals.boxes if isinstance(proposals, ProposalSet) else np.asarray(proposals, dtype=np.float64)
    boxes = boxes.reshape(-1, 4)[: max(int(k), 0)]
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(gts), dtype=bool)
    if len(gts) == 0 or len(boxes) == 0:
        return 0, flags
    m = iou_matrix(gts, boxes)
    if not exclusive:
        flags = m.max(axis=1) >= iou_t
    else:
        free = np.ones(len(boxes), dtype=bool)
        for g in range(len(gts)):
            cand = np.flatnonzero(free & (m[g] >= iou_t))
            if len(cand):
                best = cand[np.argmax(m[g, cand])]
                free[best] = False
                flags[g] = True
    return int(flags.sum()), flags


@dataclass
class RecallReport:
    """``(k, iou, bucket) -> [hits, total]``."""

    counts: dict = field(default_factory=dict)

    def add(self, k, iou, bucket, hit: bool):
        c = self.counts.setdefault((int(k), float(iou), bucket), [0, 0])
        c[0] += int(hit)
        c[1] += 1

    def recall(self, k, iou, bucket="all") -> float:
        hits, total = self.counts.get((int(k), float(iou), bucket), (0, 0))
        return hits / total if total else float("nan")

    def total(self, bucket="all") -> int:
        totals = {v[1] for (kk, ii, b), v in self.counts.items() if b == bucket}
        return max(totals) if totals else 0

    def keys(self):
        ks = sorted({k for k, _, _ in self.counts})
        ious = sorted({i for _, i, _ in self.counts})
        return ks, ious

    def rows(self, model: str):
        ks, ious = self.keys()
        out = []
        for k in ks:
            for iou in ious:
                for b in BUCKETS:
                    if (k, iou, b) in self.counts and self.counts[(k, iou, b)][1]:
                        out.append((model, k, iou, b, self.recall(k, iou, b)))
        return out


def evaluate(per_image, ks=DEFAULT_KS, ious=DEFAULT_IOUS, exclusive=False) -> RecallReport:
    """Fold ``(gts, ProposalSet)`` pairs into a report; images without GTs add nothing."""
    report = RecallReport()
    for gts, props in per_image:
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        if len(gts) == 0:
            continue
        buckets = [size_bucket(g) for g in gts]
        for k in ks:
            for iou in ious:
                _, flags = match_recall(props, gts, iou, k, exclusive)
                for b, hit in zip(buckets, flags):
                    report.add(k, iou, b, hit)
                    report.add(k, iou, "all", hit)
    return report


def collect_proposals(net, anchors, samples, n: int, nms_iou: float):
    """``[(image_id, gts, ProposalSet)]`` with ``n`` proposals per image."""
    from .training import propose

    return [(s.image_id, s.gts, propose(net, anchors, s.tensor(), n, nms_iou)) for s in samples]


def build_recall_report(net, anchors, samples, ks=DEFAULT_KS, ious=DEFAULT_IOUS, nms_iou=0.7, exclusive=False):
    props = collect_proposals(net, anchors, samples, max(ks), nms_iou)
    return evaluate([(g, p) for _, g, p in props], ks, ious, exclusive)


@dataclass
class CurveData:
    """Rows of ``(series, fixed, x, recall)``.

    ``recall_vs_k``: fixed IoU, x = proposal count.  ``recall_vs_iou``: fixed
    count, x = IoU threshold.  ``average_recall``: x = proposal count, recall
    averaged over the IoU grid.
    """

    points: list = field(default_factory=list)

    def series(self, name, fixed=None):
        return [(x, r) for s, f, x, r in self.points if s == name and (fixed is None or f == fixed)]

    def rows(self, model: str):
        return [(model, s, "" if f is None else f, x, r) for s, f, x, r in self.points]


def build_curves(per_image, ks=CURVE_KS, ious=CURVE_IOUS, fixed_ious=(0.5, 0.7, 0.9), fixed_ks=(50, 100, 300), exclusive=False) -> CurveData:
    all_ious = sorted(set(ious) | set(fixed_ious))
    all_ks = sorted(set(ks) | set(fixed_ks))
    rep = evaluate(per_image, all_ks, all_ious, exclusive)
    cd = CurveData()
    for iou in fixed_ious:
        for k in ks:
            cd.points.append(("recall_vs_k", float(iou), int(k), rep.recall(k, iou)))
    for k in fixed_ks:
        for iou in ious:
            cd.points.append(("recall_vs_iou", int(k), float(iou), rep.recall(k, iou)))
    for k in ks:
        cd.points.append(("average_recall", None, int(k), float(np.mean([rep.recall(k, i) for i in ious]))))
    return cd


def provenance_line(config_hash: str, seed: int, version: str) -> str:
    return f"# config_hash={config_hash} seed={seed} version={version}\n"


def _csv_text(header, rows, provenance: str | None) -> str:
    buf = io.StringIO()
    if provenance:
        buf.write(provenance)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def report_csv(rows, provenance=None) -> str:
    return _csv_text(REPORT_HEADER, rows, provenance)


def curves_csv(rows, provenance=None) -> str:
    return _csv_text(CURVE_HEADER, rows, provenance)


def proposals_csv(props, provenance=None) -> str:
    """``props`` is ``[(image_id, ProposalSet)]``."""
    rows = []
    for image_id, p in props:
        for score, box in zip(p.scores, p.boxes):
            rows.append((image_id, float(score), *(float(v) for v in box)))
    return _csv_text(PROPOSAL_HEADER, rows, provenance)


def read_csv(path):
    """Rows as dicts, skipping ``#`` provenance lines."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
