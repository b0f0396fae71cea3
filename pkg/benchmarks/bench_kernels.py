"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Also checks that both backends agree bit for bit on each benchmark input.
"""
import argparse
import time

import numpy as np

from nrpn import _backend
from nrpn.config import TrainConfig
from nrpn.data import GeneratorParams, generate_synthetic_dataset
from nrpn.geometry import score_order


def cases(rng):
    boxes_a = np.sort(rng.uniform(0, 128, (300, 2, 2)), axis=1).reshape(-1, 4)
    boxes_b = np.sort(rng.uniform(0, 128, (300, 2, 2)), axis=1).reshape(-1, 4)
    dense = np.sort(rng.uniform(0, 128, (3000, 2, 2)), axis=1).reshape(-1, 4)
    dense = dense[score_order(rng.random(len(dense)))]
    feat = rng.normal(size=(32, 32, 32))
    cols = rng.normal(size=(32 * 9, 16 * 16))
    return {
        "iou_matrix 300x300": lambda k: k.iou_matrix(boxes_a, boxes_b),
        "nms 3000 boxes @0.7": lambda k: k.nms_sorted(dense, 0.7, len(dense)),
        "im2col 32x32x32 k3 s1": lambda k: k.im2col(feat, 3, 3, 1, 1),
        "col2im 32x32x32 k3 s2": lambda k: k.col2im(cols, 32, 32, 32, 3, 3, 2, 1),
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def train_epoch_time(kernels, samples, repeat):
    from nrpn import training

    saved = _backend.kernels
    _backend.kernels = kernels
    try:
        cfg = TrainConfig(total_epochs=2, warmup_epochs=1)
        return best_of(lambda: training.train(samples, cfg), repeat) / cfg.total_epochs
    finally:
        _backend.kernels = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    compiled, python = _backend.compiled_kernels, _backend.python_kernels
    if compiled is None:
        print("compiled kernels are not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'compiled ms':>12s} {'numpy ms':>10s} {'speedup':>8s}  identical")
    for name, fn in cases(rng).items():
        a, b = fn(compiled), fn(python)
        same = np.asarray(a).tobytes() == np.asarray(b).tobytes()
        tc = best_of(lambda: fn(compiled), args.repeat)
        tp = best_of(lambda: fn(python), args.repeat)
        print(f"{name:28s} {tc * 1e3:12.3f} {tp * 1e3:10.3f} {tp / tc:8.1f}x  {same}")

    samples = generate_synthetic_dataset(GeneratorParams(n=20, seed=0)).samples
    tc = train_epoch_time(compiled, samples, 1)
    tp = train_epoch_time(python, samples, 1)
    print(f"{'train epoch, 20 images':28s} {tc * 1e3:12.1f} {tp * 1e3:10.1f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
