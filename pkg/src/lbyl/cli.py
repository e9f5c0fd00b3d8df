"""Command-line entry point (``lbyl``).

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 IO or
container error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .container import atomic_write, load_dataset, load_model, save_model
from .errors import ConfigError, ContainerError, LBYLError
from .harness import (
    SCHEMES,
    ExperimentConfig,
    GlobalPruneConfig,
    generate_probe_data,
    global_adaptive_prune,
    make_plan,
    run_compare,
    run_pipeline,
    sweep_lambdas,
    write_report,
)
from .metrics import accuracy, ware_profile
from .network import ARCHITECTURES, generate_synthetic
from .pruning import PruningPlan, apply_pruning
from .restoration import METHODS, Hyperparams

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.lower().replace("x", ",").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use e.g. 3x8x8") from None
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    return dims


def _grid(text: str) -> list[tuple[float, float]]:
    """``1e-5:1e-3,1e-4:1e-2`` -> list of ``(lambda1, lambda2)``."""
    pairs = []
    for item in text.split(","):
        a, sep, b = item.strip().partition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"grid entry {item!r} must look like lambda1:lambda2")
        try:
            pairs.append((float(a), float(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"grid entry {item!r} is not numeric") from None
    return pairs


def _hp(args) -> Hyperparams:
    try:
        return Hyperparams(args.lambda1, args.lambda2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _read_plan(path) -> PruningPlan:
    try:
        return PruningPlan.from_json(Path(path).read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a valid plan ({exc})") from None


def _write_json(path, data) -> None:
    atomic_write(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> None:
    model = generate_synthetic(args.arch, args.seed, args.scale, redundancy=args.redundancy)
    save_model(model, args.out, args.dtype)


def cmd_gen_data(args) -> None:
    generate_probe_data(args.count, args.seed, args.shape, args.classes, args.out)


def cmd_prune(args) -> None:
    model = load_model(args.model)
    plan = make_plan(model, args.scheme, args.criterion, args.ratio)
    atomic_write(args.plan_out, plan.to_json() + "\n")
    if args.out:
        save_model(apply_pruning(model, plan), args.out)


def _config(args, **extra) -> ExperimentConfig:
    return ExperimentConfig(
        model_path=args.model,
        plan_path=args.plan,
        hp=_hp(args),
        nm_lambda=args.nm_lambda,
        nm_threshold=args.nm_threshold,
        data_path=getattr(args, "data", None),
        **extra,
    )


def cmd_restore(args) -> None:
    cfg = _config(args, method=args.method, model_out=args.out, report_path=args.report)
    run_pipeline(cfg)


def cmd_eval(args) -> None:
    model = load_model(args.model)
    inputs, labels = load_dataset(args.data)
    out = {"accuracy": accuracy(model, inputs, labels), "samples": int(inputs.shape[0])}
    if args.reference:
        if not args.plan:
            raise ConfigError("--reference needs --plan to align pruned channels")
        reference = load_model(args.reference)
        plan = _read_plan(args.plan)
        out["reference_accuracy"] = accuracy(reference, inputs, labels)
        out["ware"] = {str(k): v for k, v in ware_profile(reference, model, plan, inputs).items()}
    _write_json(args.report, out)


def cmd_compare(args) -> None:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    cfg = _config(args, report_path=args.report)
    table = run_compare(cfg, methods)
    summary = {
        "methods": methods,
        "loss_ordering_holds": table.loss_ordering_holds,
        "loss_ordering": {f"{layer}:{j}": ok for (layer, j), ok in table.loss_ordering.items()},
        "final_ware": {m: r.final_ware for m, r in table.reports.items()},
    }
    _write_json(Path(args.report).with_suffix(".json"), summary)


def cmd_global_prune(args) -> None:
    model = load_model(args.model)
    inputs = labels = None
    if args.data:
        inputs, labels = load_dataset(args.data)
    cfg = GlobalPruneConfig(args.threshold, args.step, args.max_ratio, scheme=args.scheme)
    restored, plan, report = global_adaptive_prune(model, args.criterion, cfg, _hp(args), inputs, labels)
    save_model(restored, args.out)
    write_report(report, args.report)
    if args.plan_out:
        atomic_write(args.plan_out, plan.to_json() + "\n")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    best, table = sweep_lambdas(cfg, args.grid)
    _write_json(args.report, {"best": {"lambda1": best[0], "lambda2": best[1]}, "table": table})


def _add_lambdas(p) -> None:
    p.add_argument("--lambda1", type=float, default=Hyperparams.lambda1, help="BN offset weight")
    p.add_argument("--lambda2", type=float, default=Hyperparams.lambda2, help="ridge weight")


def _add_nm(p) -> None:
    p.add_argument("--nm-lambda", type=float, default=0.85)
    p.add_argument("--nm-threshold", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lbyl", description="Data-free filter pruning and restoration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic model")
    p.add_argument("--arch", choices=ARCHITECTURES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--redundancy", type=float, default=0.8)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gen-data", help="write a probe dataset")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=_shape, required=True, help="per-sample shape, e.g. 3x8x8")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("prune", help="select filters and write a plan")
    p.add_argument("--model", required=True)
    p.add_argument("--criterion", default="l2", help="l1, l2, l2gm or random:SEED")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--scheme", choices=tuple(SCHEMES), default="layerwise")
    p.add_argument("--plan-out", required=True)
    p.add_argument("--out", help="also write the pruned model without compensation")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("restore", help="prune by plan and compensate")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--method", choices=METHODS, default="lbyl")
    _add_lambdas(p)
    _add_nm(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="probe dataset for the optional report")
    p.add_argument("--report", help="report stem; writes .json and .csv")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", help="accuracy, and WARE against a reference model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--reference", help="original model for WARE")
    p.add_argument("--plan", help="plan relating --reference to --model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run several methods on one plan")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--methods", default="lbyl,nm,none")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    _add_lambdas(p)
    _add_nm(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("global-prune", help="per-layer ratios under a WARE ceiling")
    p.add_argument("--model", required=True)
    p.add_argument("--criterion", default="l2")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--max-ratio", type=float, default=0.9)
    p.add_argument("--scheme", choices=tuple(SCHEMES), default="layerwise")
    p.add_argument("--data", help="probe dataset (default: 16 seeded probes)")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--plan-out")
    _add_lambdas(p)
    p.set_defaults(func=cmd_global_prune)

    p = sub.add_parser("sweep", help="grid search over (lambda1, lambda2)")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--grid", type=_grid, required=True, help="e.g. 1e-5:1e-3,1e-4:1e-2")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    _add_lambdas(p)
    _add_nm(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LBYLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
