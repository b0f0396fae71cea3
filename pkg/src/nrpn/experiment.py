"""Run directories, the fixed synthetic benchmark, and the three-way ablation comparison.

A run directory holds::

    config.json         resolved run config, every default written out
    rpn.ckpt            RPN weights + provenance
    nrpn.ckpt           nRPN weights (co-training ablations only)
    train_log.csv       one row per training step
    recall_report.csv   model,k,iou,bucket,recall
    curves.csv          recall-vs-count / recall-vs-IoU / average-recall series
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from . import __version__
from .config import ABLATIONS, MODEL_NAMES, RunConfig, TrainConfig, config_hash
from .data import GeneratorParams
from .evaluation import (
    DEFAULT_IOUS,
    DEFAULT_KS,
    RecallReport,
    build_curves,
    collect_proposals,
    curves_csv,
    evaluate,
    proposals_csv,
    provenance_line,
    report_csv,
)
from .geometry import generate_anchors
from .nn import load_checkpoint, save_checkpoint
from .training import StepRecord, TrainResult, checkpoint_meta, train

# fixed benchmark: distractors outnumber objects so the RPN meets confident false positives
BENCHMARK_DISTRACTORS = (4, 8)
BENCHMARK = {
    "train": GeneratorParams(n=200, image_size=128, seed=1, distractors_per_image=BENCHMARK_DISTRACTORS),
    "test": GeneratorParams(n=50, image_size=128, seed=2, distractors_per_image=BENCHMARK_DISTRACTORS),
}
ABLATION_ORDER = ("rpn-only", "rpn+nrpn", "rpn+nrpn+overlap-loss")


def provenance(cfg: TrainConfig) -> str:
    return provenance_line(config_hash(cfg), cfg.seed, __version__)


def write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def train_log_csv(log, cfg: TrainConfig) -> str:
    buf = io.StringIO()
    buf.write(provenance(cfg))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(StepRecord.FIELDS)
    w.writerows(log.rows())
    return buf.getvalue()


def config_json(run: RunConfig) -> str:
    d = run.to_dict()
    d["provenance"] = {"config_hash": config_hash(run.train), "seed": run.train.seed, "tool_version": __version__}
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def save_run(result: TrainResult, run: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", config_json(run))
    save_checkpoint(out / "rpn.ckpt", result.rpn, checkpoint_meta(result.cfg, "rpn"))
    if result.nrpn is not None:
        save_checkpoint(out / "nrpn.ckpt", result.nrpn, checkpoint_meta(result.cfg, "nrpn"))
    write_text(out / "train_log.csv", train_log_csv(result.log, result.cfg))
    return out


def run_training(samples, run: RunConfig, out, progress=None) -> TrainResult:
    result = train(samples, run.train, progress)
    save_run(result, run, out)
    return result


def anchors_from_meta(meta: dict, height: int, width: int):
    a = meta["anchors"]
    stride = a["stride"]
    if height % stride or width % stride:
        raise ValueError(f"image size {height}x{width} is not divisible by stride {stride}")
    return generate_anchors(height // stride, width // stride, stride, a["scales"], a["ratios"])


def evaluate_checkpoint(ckpt, samples, ks=DEFAULT_KS, ious=DEFAULT_IOUS, exclusive=False):
    """Load a checkpoint, propose on ``samples``; returns ``(meta, proposals, report)``."""
    net, meta = load_checkpoint(ckpt)
    if not samples:
        raise ValueError("evaluation split is empty")
    anchors = anchors_from_meta(meta, samples[0].height, samples[0].width)
    props = collect_proposals(net, anchors, samples, max(ks), meta["nms_iou"])
    report = evaluate([(g, p) for _, g, p in props], ks, ious, exclusive)
    return meta, props, report


def meta_provenance(meta: dict) -> str:
    return provenance_line(meta["config_hash"], meta["seed"], meta["tool_version"])


def write_eval(out, model: str, meta: dict, props, report: RecallReport, dump_proposals=False, exclusive=False):
    out = Path(out)
    prov = meta_provenance(meta)
    write_text(out / "recall_report.csv", report_csv(report.rows(model), prov))
    curves = build_curves([(g, p) for _, g, p in props], exclusive=exclusive)
    write_text(out / "curves.csv", curves_csv(curves.rows(model), prov))
    if dump_proposals:
        write_text(out / "proposals.csv", proposals_csv([(i, p) for i, _, p in props], prov))


def bucket_rows(model: str, report: RecallReport, k=50, iou=0.5):
    """S, M, their union and all, at one operating point."""
    rows = []
    for b in ("S", "M", "L"):
        if (k, iou, b) in report.counts:
            rows.append((model, k, iou, b, report.recall(k, iou, b)))
    s = report.counts.get((k, iou, "S"), [0, 0])
    m = report.counts.get((k, iou, "M"), [0, 0])
    if s[1] + m[1]:
        rows.append((model, k, iou, "S+M", (s[0] + m[0]) / (s[1] + m[1])))
    rows.append((model, k, iou, "all", report.recall(k, iou)))
    return rows


def run_ablations(train_samples, test_samples, base: RunConfig, out, ablations=ABLATION_ORDER, progress=None):
    """Train and evaluate each ablation under ``out/<ablation>/``.

    Writes ``comparison.csv`` (all report rows, one block per model) and
    ``size_buckets.csv`` (recall@0.5@50 per size bucket).  Returns
    ``{ablation: RecallReport}``.
    """
    out = Path(out)
    reports, comparison, buckets = {}, [], []
    for name in ablations:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
        run = RunConfig(base.train.with_ablation(name), base.train_data, base.test_data, str(out / name), name)
        run_training(train_samples, run, out / name, progress)
        meta, props, report = evaluate_checkpoint(out / name / "rpn.ckpt", test_samples)
        model = MODEL_NAMES[name]
        write_eval(out / name, model, meta, props, report)
        reports[name] = report
        comparison += report.rows(model)
        buckets += bucket_rows(model, report)
    prov = provenance_line(config_hash(base.train), base.train.seed, __version__)
    write_text(out / "comparison.csv", report_csv(comparison, prov))
    write_text(out / "size_buckets.csv", report_csv(buckets, prov))
    return reports

