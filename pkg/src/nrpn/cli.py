"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.  Every
failure prints exactly one line to stderr::

    nrpn: error[<code>:<kind>] <message>
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from ._backend import BACKEND
from .config import ABLATIONS, MODEL_NAMES, ConfigError, RunConfig, TrainConfig, ablation_name
from .data import DatasetError, GeneratorParams, generate_synthetic_dataset, load_dataset, save_dataset, validate_params
from .evaluation import proposals_csv
from .experiment import (
    ABLATION_ORDER,
    evaluate_checkpoint,
    meta_provenance,
    run_ablations,
    run_training,
    write_eval,
    write_text,
)
from .gradcheck import run_all
from .training import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2, 3
_KINDS = {EXIT_USAGE: "usage", EXIT_VALIDATION: "validation", EXIT_NUMERIC: "numeric"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def _floats(text, n, flag):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_VALIDATION, f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise CliError(EXIT_VALIDATION, f"{flag}: expected {n} values, got {len(vals)}")
    return vals


def _ints(text, n, flag):
    vals = _floats(text, n, flag)
    if any(v != int(v) for v in vals):
        raise CliError(EXIT_VALIDATION, f"{flag}: expected integers, got {text!r}")
    return tuple(int(v) for v in vals)


def _load_run(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    t = run.train.to_dict()
    if getattr(args, "seed", None) is not None:
        t["seed"] = args.seed
    train = TrainConfig.from_dict(t)
    ablation = getattr(args, "ablation", None) or run.ablation
    if ablation:
        train = train.with_ablation(ablation)
    run = RunConfig(train, run.train_data, run.test_data, run.out, ablation or ablation_name(train))
    if getattr(args, "train_data", None):
        run.train_data = args.train_data
    if getattr(args, "test_data", None):
        run.test_data = args.test_data
    if getattr(args, "out", None):
        run.out = args.out
    run.train.validate()
    return run


def _samples(path, what):
    if not path:
        raise CliError(EXIT_VALIDATION, f"no {what} dataset given (set it in the config or pass --{what}-data)")
    return load_dataset(path).samples


def cmd_gen_data(args):
    params = GeneratorParams(
        n=args.n,
        image_size=args.size,
        size_mix=_floats(args.size_mix, 3, "--size-mix"),
        objects_per_image=_ints(args.objects, 2, "--objects"),
        distractors_per_image=_ints(args.distractors, 2, "--distractors"),
        seed=args.seed,
        stride=args.stride,
    )
    flag_of = {"size mix": "--size-mix", "objects_per_image": "--objects", "distractors_per_image": "--distractors",
               "image size": "--size", "n must": "--n", "medium": "--size-mix", "large": "--size-mix"}
    try:
        validate_params(params)
    except DatasetError as e:
        flag = next((f for key, f in flag_of.items() if key in str(e)), "--n")
        raise CliError(EXIT_VALIDATION, f"{flag}: {e}") from None
    ds = generate_synthetic_dataset(params, args.split)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} samples to {args.out}")


def cmd_train(args):
    run = _load_run(args)
    samples = _samples(run.train_data, "train")
    out = Path(run.out)

    def progress(epoch, log):
        if not args.quiet:
            print(f"epoch {epoch + 1}/{run.train.total_epochs} rpn_loss {log.epoch_mean(epoch):.4f}", flush=True)

    run_training(samples, run, out, progress)
    print(f"wrote {out}/config.json, rpn.ckpt{', nrpn.ckpt' if run.train.use_nrpn else ''}, train_log.csv")


def _checkpoint_path(args, run):
    return Path(args.checkpoint) if args.checkpoint else Path(run.out) / "rpn.ckpt"


def cmd_propose(args):
    run = _load_run(args)
    ckpt = _checkpoint_path(args, run)
    samples = _samples(args.data or run.test_data, "test")
    k = _ints(args.k, 1, "--k")[0]
    if k < 1:
        raise CliError(EXIT_VALIDATION, "--k: must be at least 1")
    meta, props, _ = evaluate_checkpoint(ckpt, samples, ks=(k,), ious=(0.5,))
    text = proposals_csv([(i, p) for i, _, p in props], meta_provenance(meta))
    if args.out_file:
        write_text(args.out_file, text)
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    run = _load_run(args)
    ckpt = _checkpoint_path(args, run)
    samples = _samples(args.data or run.test_data, "test")
    ks = _ints(args.k, None, "--k")
    ious = _floats(args.iou, None, "--iou")
    if any(k < 1 for k in ks):
        raise CliError(EXIT_VALIDATION, "--k: counts must be at least 1")
    if any(not 0 < t <= 1 for t in ious):
        raise CliError(EXIT_VALIDATION, "--iou: thresholds must lie in (0, 1]")
    meta, props, report = evaluate_checkpoint(ckpt, samples, ks, ious, args.exclusive)
    model = args.model or MODEL_NAMES.get(meta.get("ablation"), "custom")
    out = Path(args.report_dir) if args.report_dir else ckpt.parent
    write_eval(out, model, meta, props, report, args.dump_proposals, args.exclusive)
    for k in ks:
        print(f"{model} recall@{ious[0]}@{k} = {report.recall(k, ious[0]):.4f}")


def cmd_gradcheck(args):
    if args.samples < 1:
        raise CliError(EXIT_VALIDATION, "--samples: must be at least 1")
    reports = run_all(args.samples, args.tol, args.seed, max(args.tol, 1e-3))
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise CliError(EXIT_NUMERIC, f"gradient check failed for {', '.join(failed)}")


def cmd_compare(args):
    run = _load_run(args)
    train = _samples(run.train_data, "train")
    test = _samples(run.test_data, "test")
    ablations = [args.ablation] if args.ablation else list(ABLATION_ORDER)

    def progress(epoch, log):
        if not args.quiet:
            print(f"  epoch {epoch + 1}/{run.train.total_epochs} rpn_loss {log.epoch_mean(epoch):.4f}", flush=True)

    reports = run_ablations(train, test, run, run.out, ablations, progress)
    for name, rep in reports.items():
        print(f"{name:24s} recall@0.5@50 = {rep.recall(50, 0.5):.4f}")
    print(f"wrote {run.out}/comparison.csv and size_buckets.csv")


def build_parser():
    p = _Parser(prog="nrpn", description="Region proposals with a negative-proposal network and overlap loss.")
    p.add_argument("--version", action="version", version=f"nrpn {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size-mix", default="0.3,0.4,0.3", help="S,M,L proportions")
    g.add_argument("--objects", default="1,3", help="min,max objects per image")
    g.add_argument("--distractors", default="2,4", help="min,max distractors per image")
    g.add_argument("--stride", type=int, default=8)
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_gen_data)

    def run_flags(q, ablation=True):
        q.add_argument("--config", help="run config JSON")
        q.add_argument("--seed", type=int)
        q.add_argument("--out", help="run directory")
        q.add_argument("--train-data")
        q.add_argument("--test-data")
        if ablation:
            q.add_argument("--ablation", choices=sorted(ABLATIONS))
        q.add_argument("--quiet", action="store_true")

    t = sub.add_parser("train", help="train one ablation and write a run directory")
    run_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="train and evaluate all three ablations")
    run_flags(c)
    c.set_defaults(func=cmd_compare)

    for name, func, help_ in (("propose", cmd_propose, "dump top-k proposals"), ("eval", cmd_eval, "write recall report and curves")):
        q = sub.add_parser(name, help=help_)
        run_flags(q)
        q.add_argument("--checkpoint", help="defaults to <out>/rpn.ckpt")
        q.add_argument("--data", help="dataset to run on; defaults to the config's test data")
        if name == "propose":
            q.add_argument("--k", default="300")
            q.add_argument("--out-file", help="CSV path; stdout if omitted")
        else:
            q.add_argument("--k", default="50,100,300")
            q.add_argument("--iou", default="0.5,0.7,0.9")
            q.add_argument("--exclusive", action="store_true", help="one GT per proposal")
            q.add_argument("--model", help="model column value")
            q.add_argument("--report-dir", help="defaults to the checkpoint's directory")
            q.add_argument("--dump-proposals", action="store_true")
        q.set_defaults(func=func)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    gc.add_argument("--samples", type=int, default=200)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return EXIT_OK
    except CliError as e:
        code, msg = e.code, str(e)
    except (ConfigError, DatasetError, FileNotFoundError, IsADirectoryError, KeyError) as e:
        code, msg = EXIT_VALIDATION, str(e)
    except (TrainingDiverged, FloatingPointError, OverflowError) as e:
        code, msg = EXIT_NUMERIC, str(e)
    except ValueError as e:
        code, msg = EXIT_VALIDATION, str(e)
    print(f"nrpn: error[{code}:{_KINDS[code]}] {_one_line(msg)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
