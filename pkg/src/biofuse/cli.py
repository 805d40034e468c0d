"""``biofuse`` command line.

Exit codes: 0 success, 1 invalid configuration or missing inputs, 2 runtime
failure (training divergence, unreadable data, ...).
"""

import argparse
import logging
import sys

from .errors import BiofuseError, ConfigError
from . import pipeline

COMMANDS = ("synth", "ingest", "train", "eval", "fuse", "report", "gradcheck")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--dataset", help="dataset root in the canonical layout")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--threads", type=int, help="worker cap")
    common.add_argument("--modality", action="append", help="restrict to a modality (repeatable)")
    common.add_argument("--task", action="append", help="restrict to a task (repeatable)")
    common.add_argument("--fusion-mode", choices=("simple", "weighted", "both"))
    common.add_argument("--enroll-windows", choices=("all", "one"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="biofuse", description="Multimodal behavioral-biometrics authentication pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset to --out")
    s.add_argument("--subjects", type=int)
    s.add_argument("--separability", type=float)
    sub.add_parser("ingest", parents=[common], help="validate the dataset and write the split")
    sub.add_parser("train", parents=[common], help="train one encoder per modality")
    sub.add_parser("eval", parents=[common], help="score tables, DET points and EERs")
    sub.add_parser("fuse", parents=[common], help="rank fused modality subsets")
    sub.add_parser("report", parents=[common], help="write report.txt")
    g = sub.add_parser("gradcheck", parents=[common], help="BPTT gradient check on tiny encoders")
    g.add_argument("--trials", type=int, default=5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    return p


def resolve_config(args):
    cfg = pipeline.load_config(args.config) if args.config else pipeline.RunConfig()
    for flag, key in (("dataset", "dataset"), ("out", "out"), ("seed", "seed"),
                      ("threads", "threads"), ("fusion_mode", "fusion_mode"),
                      ("enroll_windows", "enroll_windows")):
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, key, v)
    if args.modality:
        cfg.modalities = list(args.modality)
    if args.task:
        cfg.tasks = list(args.task)
    return cfg.validate()


def _gradcheck(args):
    from .encoder import GradCheckSpec, gradient_check

    worst = 0.0
    for trial in range(args.trials):
        rep = gradient_check(GradCheckSpec(), seed=(args.seed or 0) + trial, tolerance=args.tolerance)
        worst = max(worst, rep.max_error)
        print(f"trial {trial}: max relative error {rep.max_error:.3e}")
    ok = worst < args.tolerance
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'}, tolerance {args.tolerance:g})")
    return 0 if ok else 2


def run(args):
    if args.command == "gradcheck":
        return _gradcheck(args)
    cfg = resolve_config(args)
    if args.command == "synth":
        pipeline.run_synth(cfg, args.subjects, args.separability)
        print(f"wrote synthetic dataset to {cfg.out}")
    elif args.command == "ingest":
        store, split, report = pipeline.run_ingest(cfg)
        print(f"{len(store.subjects())} subjects ({len(split.train_subjects)} train, "
              f"{len(split.validation_subjects)} validation, {len(split.test_subjects)} test); "
              f"{report.warning_count} warning(s)")
    elif args.command == "train":
        models, failures = pipeline.run_train(cfg, progress=print if args.verbose else None)
        for m, (_, hist) in models.items():
            print(f"{m.value}: best epoch {hist.best_epoch}, validation EER {hist.best_val_eer:.2f}%")
        for m, msg in failures.items():
            print(f"{m.value}: FAILED ({msg})", file=sys.stderr)
        if not models:
            return 2
    elif args.command == "eval":
        for split, task, modality, eer in pipeline.run_eval(cfg):
            print(f"{split:10s} {task:12s} {modality:20s} EER {eer:6.2f}%")
    elif args.command == "fuse":
        results = pipeline.run_fuse(cfg)
        print(f"ranked {len(results)} subsets -> {cfg.out}/fusion.csv")
    elif args.command == "report":
        print(pipeline.run_report(cfg), end="")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"biofuse: {exc}", file=sys.stderr)
        return 1
    except (BiofuseError, OSError, ValueError) as exc:
        print(f"biofuse: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
