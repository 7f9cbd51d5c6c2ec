"""Command-line entry point.

Subcommands: ``generate-data``, ``train``, ``evaluate``, ``gradcheck``,
``ablate``, ``report``.  Every config field is reachable as a flag with
underscores turned into dashes; precedence is built-in defaults, then
``--config`` file values, then flags.  Exit codes: 0 success, 1 invalid
arguments or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys

import numpy as np

from . import data, evaluation, gradcheck, layers, losses, training
from .config import (ConfigError, ExperimentConfig, ablation_preset,
                     merge_config, read_config_file, resolve_shift)

__all__ = ["main"]

#: Errors that mean the user asked for something invalid (exit 1), as
#: opposed to a run that failed midway (exit 2).
_USER_ERRORS = (ConfigError, data.DataError, losses.LossInputError,
                evaluation.EvalError, layers.ShapeError)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here reserves 2 for
    runtime failures, so usage errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


_CONFIG_FIELDS = {f.name: f.type for f
                  in dataclasses.fields(ExperimentConfig)}
_FLAG_TYPES = {"int": int, "float": float, "str": str}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group(
        "config fields", "every field of the run config; unset flags fall "
        "back to --config file values, then defaults")
    for name, kind in _CONFIG_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if kind == "bool":
            group.add_argument(flag, dest=name, default=None,
                               action=argparse.BooleanOptionalAction)
        else:
            group.add_argument(flag, dest=name, default=None,
                               type=_FLAG_TYPES[kind], metavar=kind.upper())
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="read key:value config lines from this file")
    parser.add_argument("--shift", metavar="PRESET|FLOAT", default=None,
                        help="domain shift strength: none, mild, moderate, "
                        "strong, or a number (overrides --gen-shift)")
    parser.add_argument("--print-config", action="store_true",
                        help="print the merged config and exit")


def _merged_config(args, preset: ExperimentConfig | None = None
                   ) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else {}
    if preset is not None:
        defaults = dataclasses.asdict(ExperimentConfig())
        preset_values = {k: v for k, v
                         in dataclasses.asdict(preset).items()
                         if defaults[k] != v}
        file_values = {**preset_values, **file_values}
    flag_values = {name: getattr(args, name) for name in _CONFIG_FIELDS
                   if getattr(args, name) is not None}
    if args.shift is not None:
        flag_values["gen_shift"] = resolve_shift(args.shift)
    return merge_config(file_values, flag_values)


def _maybe_print_config(args, cfg: ExperimentConfig) -> bool:
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return True
    return False


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_generate_data(args) -> int:
    cfg = _merged_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    manifest = data.generate_synthetic(training.generator_config(cfg),
                                       args.out)
    raw = data.ingest_manifest(manifest)
    print(f"wrote {len(raw.samples)} samples, manifest {manifest}")
    return 0


def _cmd_train(args) -> int:
    cfg = _merged_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    run_dir = training.train(cfg)
    epochs_log = os.path.join(run_dir, "epochs.csv")
    rows = open(epochs_log).read().splitlines()[1:]
    print(f"run dir {run_dir}")
    if rows:
        best: dict[str, float] = {}
        for row in rows:
            epoch, fold, auroc = row.split(",")[:3]
            best[fold] = max(best.get(fold, -1.0), float(auroc))
        summary = " ".join(f"fold{f}={v:.4f}" for f, v
                           in sorted(best.items()))
        print(f"best val AUROC per fold: {summary}")
    return 0


def _cmd_evaluate(args) -> int:
    if not args.run_dir:
        raise ConfigError("evaluate needs --run-dir pointing at a "
                          "finished training run")
    snapshot = os.path.join(args.run_dir, "config.txt")
    if not os.path.exists(snapshot):
        raise ConfigError(f"{args.run_dir} has no config snapshot; "
                          "was it produced by `triad train`?")
    file_values = read_config_file(snapshot)
    file_values.update(read_config_file(args.config) if args.config else {})
    flag_values = {name: getattr(args, name) for name in _CONFIG_FIELDS
                   if getattr(args, name) is not None}
    if args.shift is not None:
        flag_values["gen_shift"] = resolve_shift(args.shift)
    cfg = merge_config(file_values, flag_values)
    if _maybe_print_config(args, cfg):
        return 0

    dataset = training.load_dataset(
        cfg, data_dir=os.path.join(args.run_dir, "data"))
    test_p = dataset.indices(split="test", domain="P")
    test_all = dataset.indices(split="test")
    if test_p.size == 0:
        raise evaluation.EvalError(
            "dataset has no pediatric test split to evaluate on")
    spec = training.backbone_spec_from_config(
        cfg, (1,) + tuple(dataset.input_shape))
    aurocs, aligns = [], []
    for fold in range(cfg.folds):
        psets = evaluation.load_arm_checkpoint(args.run_dir, cfg.arm, spec,
                                               fold, kind=args.kind)
        pset = psets[training.ARMS[cfg.arm].eval_path]
        scores = evaluation.predict_scores(pset, spec,
                                           dataset.inputs(test_p))
        aurocs.append(evaluation.auroc(scores, dataset.labels[test_p]))
        aligns.append(evaluation.domain_alignment(pset, spec, dataset,
                                                  test_all))
        print(f"fold {fold}: test AUROC {aurocs[-1]:.4f}  "
              f"alignment {aligns[-1]:.4f}")
    print(f"mean: test AUROC {np.mean(aurocs):.4f}  "
          f"alignment {np.mean(aligns):.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    names = list(gradcheck.standard_checks())
    if not args.all:
        if not args.check:
            raise ConfigError("pass --all or at least one --check NAME")
        unknown = [n for n in args.check if n not in names]
        if unknown:
            raise ConfigError(f"unknown check(s) {unknown}; "
                              f"known: {', '.join(names)}")
        names = list(args.check)
    width = max(len(n) for n in names)
    failed = []
    for name in names:
        worst = gradcheck.run_standard(name, points=args.points,
                                       seed=args.seed)
        ok = worst < 1e-4
        if not ok:
            failed.append(name)
        print(f"{name:<{width}}  max rel err {worst:.3e}  "
              f"{'ok' if ok else 'FAIL'}")
    if failed:
        print(f"{len(failed)} of {len(names)} checks failed")
        return 2
    print(f"all {len(names)} checks passed")
    return 0


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, "
                          f"got {text!r}") from None


def _cmd_ablate(args) -> int:
    preset = ablation_preset() if args.preset else None
    cfg = _merged_config(args, preset=preset)
    if _maybe_print_config(args, cfg):
        return 0
    seeds = _parse_int_list(args.seeds, "--seeds")
    if not seeds:
        raise ConfigError("--seeds is empty")
    arms = tuple(args.arms.split(",")) if args.arms \
        else evaluation.DEFAULT_ARMS
    unknown = [a for a in arms if a not in training.ARMS]
    if unknown:
        raise ConfigError(f"unknown arm(s) {unknown}; "
                          f"known: {', '.join(training.ARMS)}")
    suite_dir = args.suite_dir or os.path.join(
        os.environ.get("TRIAD_RUN_DIR", "runs"), "ablation")

    def progress(msg):
        print(msg, flush=True)

    report = evaluation.ablation_suite(cfg, seeds, suite_dir, arms=arms,
                                       progress=progress)
    sys.stdout.write(report.to_text())
    print(f"report written to {suite_dir}/report.csv")
    if args.plots:
        for path in evaluation.write_plots(suite_dir, report):
            print(f"plot {path}")
    if not any(not r.error for r in report.rows):
        print("every arm failed", file=sys.stderr)
        return 2
    return 0


def _read_report(suite_dir: str) -> evaluation.AblationReport:
    path = os.path.join(suite_dir, "report.csv")
    if not os.path.exists(path):
        raise ConfigError(f"{path} not found; run `triad ablate` first")
    rows: dict[tuple[str, int], evaluation.ArmSeedResult] = {}
    arms: list[str] = []
    seeds: list[int] = []
    lines = open(path).read().splitlines()[1:]
    for line in lines:
        arm, seed, fold, auroc, align, error = line.split(",", 5)
        key = (arm, int(seed))
        if arm not in arms:
            arms.append(arm)
        if int(seed) not in seeds:
            seeds.append(int(seed))
        row = rows.setdefault(key, evaluation.ArmSeedResult(
            arm=arm, seed=int(seed)))
        if fold == "":
            row.error = error
        else:
            row.fold_aurocs.append(float(auroc))
            row.fold_alignments.append(float(align) if align else math.nan)
    return evaluation.AblationReport(rows=list(rows.values()), arms=arms,
                                     seeds=seeds)


def _cmd_report(args) -> int:
    report = _read_report(args.suite_dir)
    sys.stdout.write(report.to_text())
    if args.plots:
        for path in evaluation.write_plots(args.suite_dir, report):
            print(f"plot {path}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="triad",
        description="Three-path domain-bridging trainer on a synthetic "
        "two-domain benchmark.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    p = sub.add_parser("generate-data", parents=[],
                       help="write a synthetic dataset and its manifest")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="directory for blobs and manifest")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_generate_data)

    p = sub.add_parser("train", help="train one arm over all folds")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("evaluate",
                       help="score a finished run on the test split "
                       "(point --run-dir at it)")
    p.add_argument("--kind", choices=("best", "last"), default="best",
                   help="which per-fold checkpoint to score")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference checks of every layer "
                       "and loss gradient")
    p.add_argument("--all", action="store_true",
                   help="run every registered check")
    p.add_argument("--check", action="append", metavar="NAME",
                   help="run one named check (repeatable)")
    p.add_argument("--points", type=int, default=3,
                   help="random points per check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("ablate",
                       help="train and score the arm ladder across seeds")
    p.add_argument("--seeds", default="0", metavar="N,N,...",
                   help="comma-separated run seeds")
    p.add_argument("--arms", default="", metavar="A,A,...",
                   help="comma-separated arm names "
                   "(default: every arm)")
    p.add_argument("--suite-dir", default="", metavar="DIR",
                   help="output directory (default: $TRIAD_RUN_DIR/ablation "
                   "or runs/ablation)")
    p.add_argument("--preset", action="store_true",
                   help="start from the desk-scale comparison preset "
                   "instead of bare defaults")
    p.add_argument("--plots", action="store_true",
                   help="also render SVG plots (needs matplotlib)")
    _add_config_flags(p)
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("report",
                       help="re-render the summary of a finished suite")
    p.add_argument("--suite-dir", required=True, metavar="DIR")
    p.add_argument("--plots", action="store_true",
                   help="also render SVG plots (needs matplotlib)")
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
