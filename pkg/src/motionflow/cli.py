"""Command-line front end: train, sample, eval, ablate, gradcheck, probe."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .disentangle import TrainingDiverged
from .harness import (
    ABLATION_CELLS,
    CheckpointMismatch,
    ConfigError,
    config_hash,
    parse_config_file,
    preset_config,
    run_ablate,
    run_eval,
    run_sample,
    run_train,
    gradcheck_battery,
)
from .params import ParamsFormatError
from .sampler import linear_field_probe
from .svgplot import line_chart


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config file (.ini)")
    parser.add_argument("--preset", default="default",
                        help="named preset to start from (ignored with --config)")
    parser.add_argument("--seed", type=int, help="run seed override")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--steps", type=int, help="flow training steps override")


def _resolve_config(args):
    config = (parse_config_file(args.config) if args.config
              else preset_config(args.preset))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.steps is not None:
        config = replace(config, flow_steps=args.steps)
    if args.out:
        config = replace(config, out=args.out)
    return config


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    run_dir = run_train(config, out_dir=args.out or None)
    print(f"run complete: {run_dir} (config {config_hash(config)}, seed {config.seed})")
    return 0


def _cmd_sample(args) -> int:
    sample_dir = run_sample(
        args.run_dir, steps=args.steps, sample_seed=args.seed,
        frames=args.frames, count=args.count, edit=args.edit,
        plots=args.plots, out_dir=args.out)
    print(f"samples written: {sample_dir}")
    return 0


def _cmd_eval(args) -> int:
    config = parse_config_file(args.config) if args.config else None
    report = run_eval(args.generated, args.reference, config=config,
                      out_dir=args.out)
    for name in sorted(report.metrics):
        print(f"{name} = {report.metrics[name]:.6g}")
    return 0


def _cmd_ablate(args) -> int:
    config = _resolve_config(args)
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else [config.seed])
    cells = args.cells.split(",") if args.cells else list(ABLATION_CELLS)
    out_dir = args.out or "ablation"
    rows = run_ablate(config, cells, seeds, out_dir, workers=args.workers)
    metric_names = sorted(k for k in rows[0] if k not in ("cell", "seed"))
    header = f"{'cell':<12} {'seed':>4} " + " ".join(f"{m:>14}" for m in metric_names)
    print(header)
    for row in rows:
        print(f"{row['cell']:<12} {row['seed']:>4} "
              + " ".join(f"{row[m]:>14.6g}" for m in metric_names))
    print(f"grid written: {out_dir}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_battery()
    failed = 0
    for name, kind, report in results:
        flag = "ok  " if report.passed else "FAIL"
        failed += not report.passed
        print(f"{flag} {name:<18} ({kind}) max rel err {report.max_error:.3e} "
              f"tol {report.tol:.0e}")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_probe(args) -> int:
    report = linear_field_probe()
    print("steps    error        ratio")
    ratios = [""] + [f"{r:.3f}" for r in report.ratios()]
    for (n, err), ratio in zip(zip(report.ns, report.errors), ratios):
        print(f"{n:>5}    {err:.6e}  {ratio}")
    order = "n/a" if report.order is None else f"{report.order:.3f}"
    print(f"empirical convergence order: {order}")
    if args.out:
        chart = line_chart({"error": (list(report.ns), list(report.errors))},
                           title="solver error vs step count",
                           x_label="steps", y_label="error", log_y=True)
        with open(args.out, "w") as handle:
            handle.write(chart)
        print(f"chart written: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motionflow",
        description="Train, sample, and evaluate motion-latent flow models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two-stage training pipeline")
    _add_config_flags(p_train)
    p_train.set_defaults(fn=_cmd_train)

    p_sample = sub.add_parser("sample", help="generate sequences from a trained run")
    p_sample.add_argument("run_dir", help="directory produced by `train`")
    p_sample.add_argument("--steps", type=int, help="solver steps override")
    p_sample.add_argument("--seed", type=int, help="sampling seed override")
    p_sample.add_argument("--frames", type=int, help="frames per sequence")
    p_sample.add_argument("--count", type=int, help="number of sequences")
    p_sample.add_argument("--edit", choices=("eye", "pose"),
                          help="also generate with this condition group swapped")
    p_sample.add_argument("--plots", action="store_true",
                          help="emit factor-coefficient charts")
    p_sample.add_argument("--out", help="output directory")
    p_sample.set_defaults(fn=_cmd_sample)

    p_eval = sub.add_parser("eval", help="score generated sequences against references")
    p_eval.add_argument("generated", help="directory of generated sequence files")
    p_eval.add_argument("reference", help="directory of reference sequence files")
    p_eval.add_argument("--config", help="config file (default: discovered)")
    p_eval.add_argument("--out", help="directory for metrics files")
    p_eval.set_defaults(fn=_cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run the comparison grid")
    _add_config_flags(p_ablate)
    p_ablate.add_argument("--seeds", help="comma-separated seed list")
    p_ablate.add_argument("--cells", help="comma-separated cells "
                          f"(default: {','.join(ABLATION_CELLS)})")
    p_ablate.add_argument("--workers", type=int, default=2,
                          help="parallel cell processes")
    p_ablate.set_defaults(fn=_cmd_ablate)

    p_grad = sub.add_parser("gradcheck", help="check gradients against differences")
    p_grad.set_defaults(fn=_cmd_gradcheck)

    p_probe = sub.add_parser("probe", help="measure solver convergence order")
    p_probe.add_argument("--out", help="write an error chart (SVG) here")
    p_probe.set_defaults(fn=_cmd_probe)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged — {exc} "
              "(last good checkpoint kept)", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointMismatch, ParamsFormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
