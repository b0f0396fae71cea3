"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The ablation benchmark trains all three models on the fixed synthetic split
(200 train / 50 test at 128x128) through the CLI, so this module takes about
a minute.
"""
import time

import numpy as np
import pytest

from nrpn import geometry as G
from nrpn.cli import main
from nrpn.data import generate_synthetic_dataset, load_dataset, save_dataset
from nrpn.evaluation import read_csv
from nrpn.experiment import BENCHMARK, evaluate_checkpoint
from nrpn.gradcheck import run_all
from nrpn.losses import bce_loss, overlap_loss, relative_error
from nrpn.nn import conv2d_forward
from oracles import naive_conv2d, naive_nms, random_boxes, raster_iou, reference_report

pytestmark = pytest.mark.slow

ARTIFACTS = ("rpn.ckpt", "nrpn.ckpt", "train_log.csv", "recall_report.csv", "curves.csv")


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    for split, params in BENCHMARK.items():
        save_dataset(generate_synthetic_dataset(params, split), root / split)
    t0 = time.perf_counter()
    code = main(["compare", "--train-data", str(root / "train"), "--test-data", str(root / "test"),
                 "--out", str(root / "runs"), "--quiet"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return root, elapsed


def test_gradients(report_line):
    t0 = time.perf_counter()
    reports = run_all(samples=200, tol=1e-4, seed=0, end_to_end_tol=1e-3)
    elapsed = time.perf_counter() - t0
    ok = all(r.passed and r.n_checked >= 200 for r in reports) and elapsed < 60
    detail = "; ".join(f"{r.name} {r.n_checked} pts max {r.max_rel_error:.1e}" for r in reports)
    assert report_line(ok, "gradients", f"{detail}; {elapsed:.1f}s")


def test_loss_identity(report_line):
    grid = np.linspace(0.0, 1.0, 1000)
    worst = max(abs(overlap_loss(p, 1, 1.0).value - bce_loss(p, 1).value) for p in grid)
    rng = np.random.default_rng(0)
    zero = True
    for iou in rng.uniform(0.01, 1.0, 100):
        for p in np.linspace(iou, 1.0, 20):
            zero &= overlap_loss(p, 1, iou).value == 0.0
    ok = worst <= 1e-12 and zero
    assert report_line(ok, "loss identity", f"max |overlap(p,1,1) - bce(p,1)| = {worst:.1e} over 1000 p; zero above IoU: {zero}")


def test_oracles(report_line, bench):
    rng = np.random.default_rng(0)
    a = random_boxes(rng, 500, hi=40, integer=True)
    b = random_boxes(rng, 500, hi=40, integer=True)
    iou_ok = all(G.iou(x, y) == raster_iou(x, y) for x, y in zip(a, b))

    rng = np.random.default_rng(1)
    nms_ok = True
    for _ in range(100):
        boxes, scores = random_boxes(rng, 50), rng.random(50)
        nms_ok &= list(G.nms(boxes, scores, 0.5, 50)) == naive_nms(boxes, scores, 0.5, 50)

    root, _ = bench
    split = load_dataset(root / "test").samples[:10]
    _, props, rep = evaluate_checkpoint(root / "runs" / "rpn+nrpn" / "rpn.ckpt", split)
    ref = reference_report([(g, p) for _, g, p in props], (50, 100, 300), (0.5, 0.7, 0.9))
    report_ok = {key: rep.recall(*key) for key in rep.counts} == ref

    rng = np.random.default_rng(2)
    conv_err = 0.0
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        x, w, bias = rng.normal(size=(3, 11, 9)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        got, want = conv2d_forward(x, w, bias, stride, pad), naive_conv2d(x, w, bias, stride, pad)
        conv_err = max(conv_err, float(np.max(relative_error(got, want, floor=1e-12))))

    ok = iou_ok and nms_ok and report_ok and conv_err < 1e-6
    assert report_line(ok, "oracles", f"iou raster 500: {iou_ok}; nms naive 100x50: {nms_ok}; "
                                      f"recall report vs reference (10 images): {report_ok}; conv2d rel err {conv_err:.1e}")


def test_exchange_audit(report_line, bench):
    root, _ = bench
    fp_total = hard_total = steps = 0
    ok = True
    for ablation in ("rpn+nrpn", "rpn+nrpn+overlap-loss"):
        for row in read_csv(root / "runs" / ablation / "train_log.csv"):
            if row["phase"] != "cotrain":
                continue
            steps += 1
            fp, hard = int(row["fp_count"]), int(row["hard_neg_count"])
            fp_total += fp
            hard_total += hard
            ok &= row["exchange_fg_overlap"] == "0"
            if fp:
                ok &= float(row["fp_min_score"]) > 0.7 and float(row["fp_max_iou"]) < 0.3
            if hard:
                ok &= float(row["hard_max_iou"]) < 0.3
    ok = ok and fp_total > 0 and hard_total > 0
    assert report_line(ok, "exchange audit", f"{steps} co-training steps on 200 images: {fp_total} nRPN positives, "
                                             f"{hard_total} hard negatives, all within the FP / IoU rules: {ok}")


def test_ablation_recall(report_line, bench):
    root, elapsed = bench
    rows = read_csv(root / "runs" / "comparison.csv")
    r = {row["model"]: float(row["recall"]) for row in rows
         if row["k"] == "50" and row["iou"] == "0.5" and row["bucket"] == "all"}
    ok = r["RPN+nRPN"] >= r["RPN"] and r["RPN"] >= 0.70 and elapsed < 1800
    detail = ", ".join(f"{m} {v:.3f}" for m, v in r.items())
    assert report_line(ok, "ablation recall", f"recall@0.5@50: {detail}; three ablations in {elapsed:.0f}s")


def test_size_buckets(report_line, bench):
    root, _ = bench
    rows = read_csv(root / "runs" / "size_buckets.csv")
    sm = {row["model"]: float(row["recall"]) for row in rows if row["bucket"] == "S+M"}
    ok = {"RPN+nRPN", "RPN+nRPN+Lov"} <= set(sm)
    detail = ", ".join(f"{m} {v:.3f}" for m, v in sm.items())
    assert report_line(ok, "size buckets", f"S+M recall@0.5@50: {detail}")


def test_determinism(report_line, bench, tmp_path):
    root, _ = bench
    ablation = "rpn+nrpn+overlap-loss"
    rerun = tmp_path / "rerun"
    assert main(["train", "--train-data", str(root / "train"), "--ablation", ablation, "--out", str(rerun), "--quiet"]) == 0
    assert main(["eval", "--checkpoint", str(rerun / "rpn.ckpt"), "--data", str(root / "test")]) == 0
    same = {name: (rerun / name).read_bytes() == (root / "runs" / ablation / name).read_bytes() for name in ARTIFACTS}
    ok = all(same.values())
    assert report_line(ok, "determinism", f"{ablation} rerun byte-identical: " + ", ".join(f"{k} {v}" for k, v in same.items()))
