"""Command-line entry point: ``gradosr <stage> --config CFG [--run-dir DIR]``.

Exit codes: 0 success, 1 user/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, override
from .data import DatasetError, SplitError
from .gradients import StaleCacheError
from .pipeline import (
    ConfigMismatchError,
    Experiment,
    MissingArtifactError,
    ProvenanceError,
    run_experiment,
)

log = logging.getLogger("gradosr")

USER_ERRORS = (
    ConfigError,
    ConfigMismatchError,
    DatasetError,
    SplitError,
    MissingArtifactError,
    StaleCacheError,
    ProvenanceError,
    FileNotFoundError,
)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment config (YAML or JSON)")
    common.add_argument("--run-dir", type=Path, help="artifact directory (default: runs/<config stem>)")
    common.add_argument("--seeds", type=_seeds, help="comma-separated seed list overriding the config")
    common.add_argument("--tau", type=float, help="detector threshold")
    common.add_argument("--ones-count", type=int, help="number of ones in the confounding label")
    common.add_argument("--baseline", action="append", help="add a baseline row (softmax)")
    common.add_argument("--workers", type=int, default=1, help="parallel seeds for run-all")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gradosr", description="Open-set recognition with gradient-based representations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("split", "write class-split manifests"),
        ("train-classifier", "train inner (K_K) and full (K) classifiers"),
        ("extract", "extract gradient feature tables"),
        ("train-detector", "train the unknown detector"),
        ("evaluate", "score test beds and write reports"),
        ("plot", "plot gradient-magnitude distributions"),
        ("run-all", "run every stage end to end"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def effective_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    if args.tau is not None:
        changes["eval.tau"] = args.tau
    if args.ones_count is not None:
        changes["gradients.ones_count"] = args.ones_count
    if args.baseline:
        changes["eval.baselines"] = sorted(set(cfg.eval.baselines) | set(args.baseline))
    return override(cfg, **changes) if changes else cfg


def _each_seed(exp: Experiment, fn) -> None:
    for seed in exp.config.seeds:
        fn(seed)


def _report_up_to_date(path: Path, what: str, seed: int) -> bool:
    if path.exists():
        print(f"seed {seed}: {what} up to date")
        return True
    return False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        run_dir = args.run_dir or Path("runs") / args.config.stem
        exp = Experiment(cfg, run_dir)
        d = exp.dirs
        cmd = args.command

        if cmd == "split":
            def do(seed):
                if not _report_up_to_date(d.split(seed), "split", seed):
                    exp.build_split(seed)
                    print(f"seed {seed}: wrote {d.rel(d.split(seed))}")
            _each_seed(exp, do)
        elif cmd == "train-classifier":
            def do(seed):
                exp.load_split(seed)
                for which in ("inner", "full"):
                    if not _report_up_to_date(d.classifier(seed, which).with_suffix(".pt"), f"{which} classifier", seed):
                        exp.ensure_classifier(seed, which)
                        print(f"seed {seed}: trained {which} classifier")
            _each_seed(exp, do)
        elif cmd == "extract":
            def do(seed):
                fresh = d.features(seed, "train").exists() and d.features(seed, "test").exists()
                exp.build_features(seed)
                print(f"seed {seed}: features {'up to date' if fresh else 'written'}")
            _each_seed(exp, do)
        elif cmd == "train-detector":
            def do(seed):
                exp.load_features(seed, "train")
                if not _report_up_to_date(d.detector(seed).with_suffix(".pt"), "detector", seed):
                    det = exp.build_detector(seed)
                    print(f"seed {seed}: detector val accuracy {det.training_meta.get('val_accuracy', float('nan')):.3f}")
            _each_seed(exp, do)
        elif cmd == "evaluate":
            per_seed = [exp.evaluate_seed(seed) for seed in cfg.seeds]
            result = exp.collect(per_seed)
            js, txt = exp.write_reports(result)
            sys.stdout.write(txt.read_text())
        elif cmd == "plot":
            def do(seed):
                files = exp.plot_seed(seed, cfg.eval.plot_dims)
                print(f"seed {seed}: {len(files)} plots under {d.rel(d.plots(seed))}")
            _each_seed(exp, do)
        elif cmd == "run-all":
            result = run_experiment(cfg, run_dir, workers=args.workers)
            sys.stdout.write((d.root / "reports" / "report.txt").read_text())
            if result.partial:
                print("error: some seeds failed; report marked partial", file=sys.stderr)
                return 2
        return 0
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
