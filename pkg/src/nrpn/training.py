"""Warm-up then co-training of the RPN and the negative RPN.

During warm-up only the RPN trains, against random easy negatives.  Once
co-training starts, each image goes through one exchange cycle:

1. RPN forward; its confident anchors far from every GT are false positives.
2. The nRPN trains (plain BCE) with those false positives as positives.
3. The nRPN's top-scoring non-object anchors replace part of the RPN's easy
   negatives.
4. The RPN trains on the mixed negatives with the overlap loss or BCE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import TrainConfig, ablation_name, config_hash
from .geometry import AnchorSet, ProposalSet, clip_boxes, decode, encode, generate_anchors, iou_matrix, nms
from .labeling import (
    AnchorLabelSet,
    assign_rpn_base_labels,
    build_nrpn_labels,
    find_false_positives,
    inject_hard_negatives,
    select_hard_negatives,
)
from .losses import total_loss
from .nn import SGD, HeadOutput, ProposalNet


class TrainingDiverged(ArithmeticError):
    pass


def anchors_for(cfg: TrainConfig, height: int, width: int) -> AnchorSet:
    s = cfg.anchors.stride
    if height % s or width % s:
        raise ValueError(f"image size {height}x{width} is not divisible by stride {s}")
    return generate_anchors(height // s, width // s, s, cfg.anchors.scales, cfg.anchors.ratios)


def rpn_loss(net: ProposalNet, out: HeadOutput, anchors: AnchorSet, labels: AnchorLabelSet, gts, cfg: TrainConfig, overlap: bool):
    """Loss over labelled anchors plus gradients in head-map layout.

    Returns ``(TotalLoss, grad_logits, grad_reg)``; ``grad_reg`` is None for
    score-only networks.
    """
    idx = np.sort(np.concatenate([labels.foreground, labels.negatives]))
    scores = out.scores()
    fg = labels.foreground
    t = t_star = None
    if net.with_regression and len(fg):
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        t = out.deltas()[fg]
        t_star = encode(anchors.boxes[fg], gts[labels.matched_gt[fg]])
    tl = total_loss(scores[idx], labels.p_star[idx], labels.matched_iou[idx], t, t_star, cfg.loss, overlap)

    g_scores = np.zeros(len(scores))
    g_scores[idx] = tl.grad_p
    grad_logits = net.scores_to_map_grad(g_scores, out)
    grad_reg = None
    if net.with_regression:
        g_deltas = np.zeros((len(scores), 4))
        if len(fg):
            g_deltas[fg] = tl.grad_t
        grad_reg = net.deltas_to_map_grad(g_deltas, out)
    return tl, grad_logits, grad_reg


@dataclass
class StepRecord:
    epoch: int
    step: int
    image_id: str
    phase: str
    rpn_loss: float
    nrpn_loss: float | None = None
    fp_count: int = 0
    hard_neg_count: int = 0
    # exchange audit, recomputed independently of the selection code
    fp_min_score: float | None = None
    fp_max_iou: float | None = None
    hard_max_iou: float | None = None
    exchange_fg_overlap: int = 0

    FIELDS = (
        "epoch", "step", "image_id", "phase", "rpn_loss", "nrpn_loss", "fp_count",
        "hard_neg_count", "fp_min_score", "fp_max_iou", "hard_max_iou", "exchange_fg_overlap",
    )

    def row(self):
        return [_fmt(getattr(self, f)) for f in self.FIELDS]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def epoch_mean(self, epoch: int, key: str = "rpn_loss") -> float:
        vals = [getattr(r, key) for r in self.records if r.epoch == epoch and getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        return [r.row() for r in self.records]


@dataclass
class TrainResult:
    rpn: ProposalNet
    nrpn: ProposalNet | None
    log: TrainLog
    cfg: TrainConfig

    def meta(self, kind: str) -> dict:
        return checkpoint_meta(self.cfg, kind)


def checkpoint_meta(cfg: TrainConfig, kind: str) -> dict:
    return {
        "kind": kind,
        "ablation": ablation_name(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "tool_version": __version__,
        "anchors": {"stride": cfg.anchors.stride, "scales": list(cfg.anchors.scales), "ratios": list(cfg.anchors.ratios)},
        "nms_iou": cfg.nms_iou,
    }


def _audit(anchors, gts, scores, fp, hard, rpn_fg):
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)

    def worst_iou(idx):
        if len(idx) == 0:
            return None
        if len(gts) == 0:
            return 0.0
        return float(iou_matrix(anchors.boxes[idx], gts).max())

    fg = set(rpn_fg.tolist())
    return dict(
        fp_min_score=float(scores[fp].min()) if len(fp) else None,
        fp_max_iou=worst_iou(fp),
        hard_max_iou=worst_iou(hard),
        exchange_fg_overlap=len(fg & set(fp.tolist())) + len(fg & set(hard.tolist())),
    )


def train(samples, cfg: TrainConfig, progress=None) -> TrainResult:
    """Train on a list of :class:`~nrpn.data.SampleRecord` with batch size 1."""
    cfg.validate()
    samples = list(samples)
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    h, w = samples[0].height, samples[0].width
    anchors = anchors_for(cfg, h, w)
    a = cfg.anchors.num_per_cell

    init_rng = np.random.default_rng([cfg.seed, 1])
    rpn = ProposalNet(cfg.net, a, True, init_rng)
    nrpn = ProposalNet(cfg.net, a, False, init_rng) if cfg.use_nrpn else None
    opt_rpn = SGD(rpn, cfg.lr, cfg.momentum)
    opt_nrpn = SGD(nrpn, cfg.lr, cfg.momentum) if nrpn else None
    order_rng = np.random.default_rng([cfg.seed, 2])
    label_rng = np.random.default_rng([cfg.seed, 3])
    n_hard = int(round(cfg.labels.num_neg * cfg.labels.hard_neg_fraction))

    log = TrainLog()
    step = 0
    for epoch in range(cfg.total_epochs):
        cotrain = nrpn is not None and epoch >= cfg.warmup_epochs
        overlap = cfg.use_overlap_loss and (epoch >= cfg.warmup_epochs or cfg.overlap_in_warmup)
        for i in order_rng.permutation(len(samples)):
            s = samples[i]
            if (s.height, s.width) != (h, w):
                raise ValueError(f"image {s.image_id} is {s.width}x{s.height}; all images must be {w}x{h}")
            image = s.tensor()
            out = rpn.forward(image)
            scores = out.scores()
            labels = assign_rpn_base_labels(anchors, s.gts, cfg.labels, label_rng)
            rec = StepRecord(epoch, step, s.image_id, "cotrain" if cotrain else "warmup", 0.0)

            if cotrain:
                fp = find_false_positives(labels, scores, cfg.labels)[: cfg.labels.max_fp]
                nout = nrpn.forward(image)
                nlabels = build_nrpn_labels(fp, anchors, s.gts, cfg.labels, label_rng)
                if len(fp):
                    ntl, ngl, _ = rpn_loss(nrpn, nout, anchors, nlabels, s.gts, cfg, overlap=False)
                    if not math.isfinite(ntl.value):
                        raise TrainingDiverged(f"nRPN loss became {ntl.value} at epoch {epoch}, image {s.image_id}")
                    nrpn.backward(ngl)
                    opt_nrpn.step()
                    rec.nrpn_loss = ntl.value
                hard = select_hard_negatives(nout.scores(), anchors, s.gts, n_hard, cfg.labels, exclude=labels.foreground)
                labels = inject_hard_negatives(labels, hard, cfg.labels, label_rng)
                rec.fp_count = len(fp)
                rec.hard_neg_count = len(hard)
                for k, v in _audit(anchors, s.gts, scores, fp, hard, labels.foreground).items():
                    setattr(rec, k, v)

            tl, gl, gr = rpn_loss(rpn, out, anchors, labels, s.gts, cfg, overlap)
            if not math.isfinite(tl.value):
                raise TrainingDiverged(f"RPN loss became {tl.value} at epoch {epoch}, image {s.image_id}")
            rpn.backward(gl, gr)
            opt_rpn.step()
            rec.rpn_loss = tl.value
            log.records.append(rec)
            step += 1
        if progress is not None:
            progress(epoch, log)
    return TrainResult(rpn, nrpn, log, cfg)


def propose(net: ProposalNet, anchors: AnchorSet, image, n: int, nms_iou: float = 0.7) -> ProposalSet:
    """Top-``n`` proposals after decoding (RPN) or raw anchors (nRPN), clipping and NMS."""
    image = np.asarray(image, dtype=np.float64)
    out = net.forward(image)
    scores = out.scores()
    boxes = decode(anchors.boxes, out.deltas()) if net.with_regression else np.array(anchors.boxes)
    boxes = clip_boxes(boxes, image.shape[2], image.shape[1])
    valid = np.flatnonzero((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]))
    keep = valid[nms(boxes[valid], scores[valid], nms_iou, n)]
    return ProposalSet(boxes[keep], scores[keep])
