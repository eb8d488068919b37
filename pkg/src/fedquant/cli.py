"""Command-line front end.

Subcommands:
  run              execute a configured experiment and emit artifacts
  bound            evaluate the convergence-bound calculator and print JSON
  partition-stats  inspect the non-IID client partition of a config
  eval             re-run the bit-width sweep from a saved checkpoint

Exit codes are part of the contract: 0 success, 2 configuration error,
3 training divergence, 4 I/O failure, 5 learning-rate conditions violated
(bound subcommand only; the report is still printed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as cfgmod
from .data import partition_stats
from .errors import ConfigError, DivergedError, FedQuantError
from .evaluation import sweep
from .federation import (config_hash, load_checkpoint, make_calibration_batch,
                         run, save_checkpoint)
from .rng import RngStream
from .theory import BoundInputs, compute_bound

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_CONDITIONS = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedquant",
        description="Desk-scale federated simulator with quantization-robust "
                    "client training and a convergence-bound calculator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train, sweep bit-widths, emit artifacts")
    p_run.add_argument("--config", required=True, help="path to a JSON experiment config")
    p_run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted path, JSON value); repeatable")
    p_run.add_argument("--out", default=None, help="output directory (default: config output.dir)")
    p_run.add_argument("--threads", type=int, default=1,
                       help="client worker threads; must not change results")
    p_run.add_argument("--quiet", action="store_true", help="suppress progress lines")

    p_bound = sub.add_parser("bound", help="evaluate the convergence bound, print JSON")
    p_bound.add_argument("--config", default=None,
                         help="JSON file with the inputs below (flags win)")
    p_bound.add_argument("--smoothness", type=float, default=None,
                         help="gradient Lipschitz constant L (1/param units)")
    p_bound.add_argument("--sigma-local", type=float, default=None,
                         help="mini-batch gradient noise bound sigma_l (gradient units)")
    p_bound.add_argument("--sigma-global", type=float, default=None,
                         help="client drift bound sigma_g (gradient units)")
    p_bound.add_argument("--dim", type=int, default=None,
                         help="parameter count D (dimensionless)")
    p_bound.add_argument("--local-steps", type=int, default=None,
                         help="local SGD steps per round K (dimensionless)")
    p_bound.add_argument("--rounds", type=int, default=None,
                         help="federated rounds T (dimensionless)")
    p_bound.add_argument("--eta-client", type=float, default=None,
                         help="client learning rate (step units)")
    p_bound.add_argument("--eta-server", type=float, default=None,
                         help="server learning rate (step units)")
    p_bound.add_argument("--method", choices=("apqn", "qat", "mqat"), default=None,
                         help="training method determining the noise radius R")
    p_bound.add_argument("--step", type=float, action="append", default=None,
                         help="quantizer step size (weight units); repeat for mqat")
    p_bound.add_argument("--initial-gap", type=float, default=None,
                         help="loss gap F(start) - F(best) (loss units)")

    p_stats = sub.add_parser("partition-stats",
                             help="print per-client sizes and label entropy as JSON")
    p_stats.add_argument("--config", required=True)
    p_stats.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p_eval = sub.add_parser("eval", help="re-sweep a checkpoint at the configured bit-widths")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", default=None, help="directory for eval.csv / eval.json")
    p_eval.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override eval-section entries of the embedded config")
    return parser


def _artifacts(doc: dict, state, history, report, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    history.to_csv(os.path.join(out_dir, "history.csv"))
    report.to_csv(os.path.join(out_dir, "eval.csv"))
    report.to_json(os.path.join(out_dir, "eval.json"))
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), state, doc)
    meta = {"config": doc, "config_hash": config_hash(doc),
            "rounds_completed": state.round_idx,
            "artifacts": ["history.csv", "eval.csv", "eval.json", "checkpoint.json"]}
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def cmd_run(args) -> int:
    doc = cfgmod.load_config(args.config, args.set)
    fed = cfgmod.build_fed_config(doc)
    strat = cfgmod.build_strategy(doc)
    data = cfgmod.build_data(doc)
    hidden = cfgmod.hidden_widths(doc)
    bit_configs = cfgmod.build_bit_configs(doc)
    out_dir = args.out or doc["output"]["dir"]

    def progress(round_idx, row):
        if not args.quiet:
            print(f"round {round_idx}/{fed.total_rounds} "
                  f"val_acc={row.val_accuracy:.4f} val_loss={row.val_loss:.4f} "
                  f"client_loss={row.mean_client_loss:.4f}")

    state, history = run(fed, strat, data, hidden=hidden,
                         threads=max(1, args.threads), progress=progress)
    calib = make_calibration_batch(data.base, fed.batch_size, RngStream(fed.seed))
    metadata = {"seed": doc["seed"], "config_hash": config_hash(doc),
                "rounds_completed": state.round_idx, "config": doc}
    report = sweep(state, strat, bit_configs, data.holdout,
                   calib_batch=calib, metadata=metadata,
                   exempt_first_last=doc["eval"]["exempt_first_last"])
    _artifacts(doc, state, history, report, out_dir)
    if not args.quiet:
        for row in report.rows:
            wb = "-" if row.weight_bits is None else row.weight_bits
            ab = "-" if row.act_bits is None else row.act_bits
            print(f"eval {row.strategy} W-{wb} A-{ab} "
                  f"acc={row.accuracy:.4f} loss={row.loss:.4f}")
        print(f"artifacts written to {out_dir}")
    return EXIT_OK


_BOUND_FIELDS = {
    "smoothness": "L", "sigma_local": "sigma_l", "sigma_global": "sigma_g",
    "dim": "D", "local_steps": "K", "rounds": "T", "eta_client": "eta_c",
    "eta_server": "eta_s", "method": "method", "step": "steps",
    "initial_gap": "initial_gap",
}


def cmd_bound(args) -> int:
    values: dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                values.update(json.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"bound config not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bound config is not valid JSON: {exc}") from exc
    for flag, field in _BOUND_FIELDS.items():
        given = getattr(args, flag)
        if given is not None:
            values[field] = given
    missing = [f for f in ("L", "sigma_l", "sigma_g", "D", "K", "T", "eta_c",
                           "eta_s", "method", "steps", "initial_gap")
               if f not in values]
    if missing:
        raise ConfigError(f"missing bound inputs: {', '.join(missing)}")
    steps = values["steps"]
    if isinstance(steps, (int, float)):
        steps = [steps]
    inputs = BoundInputs(L=values["L"], sigma_l=values["sigma_l"],
                         sigma_g=values["sigma_g"], D=int(values["D"]),
                         K=int(values["K"]), T=int(values["T"]),
                         eta_c=values["eta_c"], eta_s=values["eta_s"],
                         method=values["method"], steps=tuple(steps),
                         initial_gap=values["initial_gap"])
    report = compute_bound(inputs)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.conditions_ok else EXIT_CONDITIONS


def cmd_partition_stats(args) -> int:
    doc = cfgmod.load_config(args.config, args.set)
    data = cfgmod.build_data(doc)
    stats = partition_stats(data.base.labels, data.assignment,
                            data.base.num_classes)
    stats["alpha"] = data.alpha
    stats["config_hash"] = config_hash(doc)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    state, doc = load_checkpoint(args.checkpoint)
    doc = cfgmod.validate_config(cfgmod.apply_overrides(doc, args.set))
    strat = cfgmod.build_strategy(doc)
    data = cfgmod.build_data(doc)
    fed = cfgmod.build_fed_config(doc)
    calib = make_calibration_batch(data.base, fed.batch_size, RngStream(fed.seed))
    metadata = {"seed": doc["seed"], "config_hash": config_hash(doc),
                "rounds_completed": state.round_idx, "config": doc}
    report = sweep(state, strat, cfgmod.build_bit_configs(doc), data.holdout,
                   calib_batch=calib, metadata=metadata,
                   exempt_first_last=doc["eval"]["exempt_first_last"])
    print(json.dumps(report.to_json_dict(), indent=2))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.to_csv(os.path.join(args.out, "eval.csv"))
        report.to_json(os.path.join(args.out, "eval.json"))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "bound": cmd_bound,
                "partition-stats": cmd_partition_stats, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        where = f" (round {exc.round_idx}, client {exc.client_id})" \
            if exc.round_idx is not None else ""
        print(f"error: training diverged{where}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedQuantError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
