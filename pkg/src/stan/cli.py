"""Command line entry point: ``stan {gen-data,train,eval,suite,report}``.

Every RunConfig and ModelConfig field is a ``--kebab-case`` flag. A
``--config`` file of ``key = value`` lines supplies values first, then the
``STAN_SEED`` environment variable, then explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ConfigError, ModelConfig, RunConfig
from .encoders import load_weights_into, save_weights
from .harness import (
    EVAL_SPLIT,
    SUITES,
    ExperimentRow,
    emit_report,
    evaluate,
    load_or_generate,
    prepare,
    read_report,
    run_experiment_suite,
    train,
)
from .model import build_model
from .synthdata import generate_dataset, save_dataset

log = logging.getLogger("stan")

_SKIP = {"model"}


def _config_fields() -> dict[str, type]:
    """Flag name -> python type for every tunable field."""
    out: dict[str, Any] = {}
    for cls in (RunConfig, ModelConfig):
        defaults = cls()
        for f in dataclasses.fields(cls):
            if f.name in _SKIP:
                continue
            value = getattr(defaults, f.name)
            out[f.name] = type(value) if value is not None else str
    return out


FIELDS = _config_fields()


def parse_value(name: str, text: str):
    kind = FIELDS[name]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {text!r}")
    if kind is tuple:
        return tuple(float(x) for x in text.replace("(", "").replace(")", "").split(","))
    if name in ("dataset", "eval_dataset", "report") and text.lower() in ("", "none"):
        return None
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind.__name__}") from exc


def read_config_file(path) -> dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = parse_value(key, value)
    return values


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="file of 'key = value' lines")
    for name, kind in FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            g.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=name, default=None, metavar=kind.__name__.upper())


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    if environ.get("STAN_SEED"):
        values["seed"] = parse_value("seed", environ["STAN_SEED"])
    for name in FIELDS:
        given = getattr(args, name, None)
        if given is not None:
            values[name] = given if isinstance(given, bool) else parse_value(name, str(given))
    return RunConfig().replace(**values).validate()


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args, run: RunConfig) -> int:
    n = run.n_per_class if args.split == 0 else run.eval_per_class
    clips = generate_dataset(run.seed, n, run.model, split=args.split)
    save_dataset(clips, args.out)
    log.info("wrote %d clips to %s", len(clips), args.out)
    return 0


def cmd_train(args, run: RunConfig) -> int:
    result = train(run)
    save_weights(args.weights_out, result.model.state())
    if args.losses_out:
        np.savetxt(args.losses_out, np.asarray(result.losses), fmt="%.17g")
    log.info("trained %d steps, final loss %.4f", len(result.losses), result.losses[-1] if result.losses else float("nan"))
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    model = build_model(run.model, run.seed)
    if args.weights:
        load_weights_into(model.state(), args.weights)
    data = prepare(model, load_or_generate(run, EVAL_SPLIT))
    report = evaluate(model, data, run.task, run.use_dsl)
    metrics = report.flat()
    for k in sorted(metrics):
        print(f"{k} {metrics[k]:.4f}")
    if run.report:
        m = run.model
        row = ExperimentRow(
            variant=args.label,
            switches={"cross": m.use_cross_frame, "intra": m.use_intra_frame,
                      "branch": m.use_branch, "multilevel": m.use_multilevel},
            task=run.task,
            metrics=metrics,
            seconds=0.0,
        )
        emit_report([row], run.report)
    return 0


def cmd_suite(args, run: RunConfig) -> int:
    if not run.report:
        raise ConfigError("suite needs --report")
    rows = run_experiment_suite(run, args.suite, timing=args.timing)
    emit_report(rows, run.report)
    log.info("wrote %d rows to %s", len(rows), run.report)
    return 0


def cmd_report(args, run: RunConfig) -> int:
    rows = read_report(args.path)
    metrics = sorted({r["metric"] for r in rows})
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    table = {(r["variant"], r["metric"]): r["value"] for r in rows}
    width = max(len(v) for v in variants + ["variant"])
    print("variant".ljust(width), *(m.rjust(10) for m in metrics))
    for v in variants:
        print(v.ljust(width), *(table.get((v, m), "-").rjust(10) for m in metrics))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=int, default=0, help="0 = train draw, 1 = eval draw")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train branch + head/text encoder, write weights")
    p.add_argument("--weights-out", required=True)
    p.add_argument("--losses-out")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a (trained) model on the eval split")
    p.add_argument("--weights")
    p.add_argument("--label", default="eval")
    _add_config_flags(p)

    p = sub.add_parser("suite", help="run an experiment suite and write a CSV report")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--timing", action="store_true", help="record wall time (makes the CSV run-dependent)")
    _add_config_flags(p)

    p = sub.add_parser("report", help="print a CSV report as a table")
    p.add_argument("path")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "suite": cmd_suite,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        run = resolve_config(args) if args.command != "report" else RunConfig()
        return COMMANDS[args.command](args, run)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"stan {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
