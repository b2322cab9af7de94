"""Command-line entry point: ``reflowlab <subcommand> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .budget import BudgetLedger, flops_estimate
from .config import RunConfig, load_config, stream_rng
from .errors import ConfigError, DegenerateInputError, NonFiniteError, SchemaError, ShapeError
from .meanflow import MeanFlowModel
from .metrics import write_csv
from .pipeline import (
    EvalSet,
    evaluate,
    load_model,
    one_step_generate,
    planned_ledgers,
    run_comparison,
    run_heatmap,
    run_stage1,
    run_stage2,
    run_stage3,
    write_manifest,
)
from .rectflow import integrate_ode

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage as a single machine-readable line."""

    def error(self, message: str):
        raise CliError("usage", message)


def _common(p: argparse.ArgumentParser, iters_help: str | None = None) -> None:
    p.add_argument("--config", metavar="PATH", help="YAML run config; built-in defaults when omitted")
    p.add_argument("--seed", type=int, help="master seed; every stage seed derives from it")
    if iters_help:
        p.add_argument("--iters", type=int, help=iters_help)
    p.add_argument("--truncate-k", type=float, dest="truncate_k",
                   help="percent of longest couplings dropped before mean-flow training")
    p.add_argument("--out", metavar="DIR", help="output directory (checkpoints/, couplings/, reports/, figures/)")
    p.add_argument("--workers", type=int, help="threads for coupling generation; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reflowlab", description="Rectified flow, reflow couplings and mean-flow training "
                     "on 2D toy tasks.")
    parser.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train-flow", help="stage 1: train the 1-rectified flow")
    _common(p, "stage-1 training steps")

    p = sub.add_parser("reflow", help="stage 2: generate and truncate rectified couplings")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="flow checkpoint (default <out>/checkpoints/flow1.json)")

    p = sub.add_parser("train-meanflow", help="stage 3: train the mean-flow model on couplings")
    _common(p, "stage-3 training steps")
    p.add_argument("--couplings", metavar="PATH", help="coupling file (default <out>/couplings/reflow.rmfc)")

    p = sub.add_parser("sample", help="draw samples from a checkpoint and write them as CSV")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("-n", "--num", type=int, default=1000, help="number of samples (default 1000)")
    p.add_argument("--steps", type=int, default=1, help="Euler steps for a flow checkpoint (default 1)")
    p.add_argument("--output", metavar="PATH", help="CSV path (default <out>/reports/samples.csv)")

    p = sub.add_parser("eval", help="one-step evaluation report for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--name", default=None, help="method label in the report (default: file stem)")

    p = sub.add_parser("compare", help="budgeted three-way comparison with reports, curves and a manifest")
    _common(p, "per-stage steps; MeanFlow-from-scratch gets twice this")

    p = sub.add_parser("heatmap", help="(t, r) loss heatmap of a mean-flow checkpoint")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="default <out>/checkpoints/meanflow.json")
    p.add_argument("--couplings", metavar="PATH", help="default <out>/couplings/reflow.rmfc")

    p = sub.add_parser("budget", help="FLOP estimate per method, planned from the config or read from a manifest")
    _common(p)
    p.add_argument("--manifest", metavar="PATH", help="report the ledgers recorded in this manifest instead")
    p.add_argument("--flops-per-forward", type=float, dest="flops_per_forward",
                   help="override the per-sample forward cost")
    p.add_argument("--backward-multiplier", type=float, default=2.0, dest="backward_multiplier",
                   help="backward (and JVP) cost in forward units (default 2)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    over = {"seed": args.seed, "out": args.out, "reflow.workers": args.workers,
            "reflow.truncate_k": args.truncate_k}
    iters = getattr(args, "iters", None)
    if iters is not None:
        if args.command == "train-flow":
            over["stage1.iters"] = iters
        elif args.command == "train-meanflow":
            over["stage3.iters"] = iters
        elif args.command == "compare":
            over.update({"stage1.iters": iters, "stage3.iters": iters,
                         "comparison.second_flow_iters": iters, "comparison.scratch_iters": 2 * iters})
    return cfg.with_overrides(**over)


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out)


def _existing(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise CliError("missing_file", f"{what} not found: {path}")
    return path


def cmd_train_flow(cfg: RunConfig, args) -> dict:
    led = BudgetLedger()
    path = run_stage1(cfg, ledger=led)
    return {"checkpoint": str(path), "train_steps": led.train_steps}


def cmd_reflow(cfg: RunConfig, args) -> dict:
    ckpt = _existing(args.checkpoint or _out(cfg) / "checkpoints" / "flow1.json", "flow checkpoint")
    path = run_stage2(cfg, ckpt)
    return {"couplings": str(path)}


def cmd_train_meanflow(cfg: RunConfig, args) -> dict:
    cpl = _existing(args.couplings or _out(cfg) / "couplings" / "reflow.rmfc", "coupling file")
    path = run_stage3(cfg, cpl)
    return {"checkpoint": str(path)}


def cmd_sample(cfg: RunConfig, args) -> dict:
    model = load_model(_existing(args.checkpoint, "checkpoint"))
    task = cfg.task.build()
    rng = stream_rng(cfg.seed, "eval")
    cls = None
    if model.n_classes:
        _, cls = task.sample_data(args.num, rng)
    z = task.sample_prior(args.num, rng)
    if isinstance(model, MeanFlowModel) or args.steps == 1:
        x = one_step_generate(model, z, cls)
    else:
        x = integrate_ode(model, z, args.steps, cls=cls)
    rows = [{f"x{j}": float(v) for j, v in enumerate(row)} for row in x]
    if cls is not None:
        for row, c in zip(rows, cls):
            row["class"] = int(c)
    path = write_csv(args.output or _out(cfg) / "reports" / "samples.csv", rows)
    return {"samples": str(path), "n": len(rows)}


def cmd_eval(cfg: RunConfig, args) -> dict:
    ckpt = _existing(args.checkpoint, "checkpoint")
    model = load_model(ckpt)
    task = cfg.task.build()
    evs = EvalSet.build(cfg, task)
    teacher = _out(cfg) / "checkpoints" / "flow1.json"
    if teacher.is_file():
        evs.teacher = integrate_ode(load_model(teacher), evs.z, 100, cls=evs.cls)
    name = args.name or ckpt.stem
    rep = evaluate(name, model, task, cfg, evs)
    path = rep.save(_out(cfg) / "reports" / f"eval_{name}.txt")
    return {"report": str(path), "outlier_rate": rep.outlier_rate, "energy_distance": rep.energy_distance}


def cmd_compare(cfg: RunConfig, args) -> dict:
    res = run_comparison(cfg)
    return {"manifest": str(res.manifest),
            **{f"{m}.{k}": getattr(r, k) for m, r in res.reports.items()
               for k in ("status", "outlier_rate", "energy_distance")}}


def cmd_heatmap(cfg: RunConfig, args) -> dict:
    ckpt = _existing(args.checkpoint or _out(cfg) / "checkpoints" / "meanflow.json", "mean-flow checkpoint")
    cpl = _existing(args.couplings or _out(cfg) / "couplings" / "reflow.rmfc", "coupling file")
    return {"heatmap": str(run_heatmap(cfg, ckpt, cpl))}


def cmd_budget(cfg: RunConfig, args) -> dict:
    if args.manifest:
        doc = json.loads(_existing(args.manifest, "manifest").read_text())
        ledgers = {m: BudgetLedger.from_dict(d) for m, d in doc.get("ledgers", {}).items()}
    else:
        ledgers = planned_ledgers(cfg)
    out = {}
    for m, led in ledgers.items():
        if args.flops_per_forward:
            led.flops_per_forward = args.flops_per_forward
        est = flops_estimate(led, args.backward_multiplier)
        out[f"{m}.forward_evals"] = led.forward_evals
        out[f"{m}.train_steps"] = led.train_steps
        for phase, v in est.items():
            out[f"{m}.flops.{phase}"] = v
    return out


COMMANDS = {
    "train-flow": cmd_train_flow,
    "reflow": cmd_reflow,
    "train-meanflow": cmd_train_meanflow,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "heatmap": cmd_heatmap,
    "budget": cmd_budget,
}


def _fail(kind: str, message: str) -> None:
    msg = " ".join(str(message).split())
    print(f"error kind={kind} message={json.dumps(msg)}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        _fail(exc.kind, exc)
        return exc.code
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg, args)
    except CliError as exc:
        _fail(exc.kind, exc)
        return exc.code
    except SchemaError as exc:
        _fail("schema", exc)
        return EXIT_CONFIG
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except (NonFiniteError, DegenerateInputError, ShapeError, ValueError, OSError) as exc:
        _fail(type(exc).__name__, exc)
        return EXIT_RUNTIME
    if args.command not in ("compare", "budget") and Path(cfg.out).is_dir():
        write_manifest(Path(cfg.out), cfg)
    for key, val in result.items():
        print(f"{key} = {val}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
