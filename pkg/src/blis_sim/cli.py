"""Command-line surface: run one scenario, sweep strategy comparisons,
train/evaluate a forecaster on a trace, or dissect a packet hex dump.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import glob as globlib
import json
import os
import sys

from .energy import TraceFormatError, load_trace_csv
from .engine import ConfigError, build_scenario, run
from .forecaster import (
    ForecastError,
    TrainConfig,
    ewma_model,
    one_step_predictions,
    persistence_model,
    rmse,
    train,
)
from .metrics import (
    STRATEGY_LABELS,
    ComparisonReport,
    MetricsError,
    compare,
    compute_metrics,
    emit_outputs,
    _row,
)
from .protocol import Malformed, describe_packet


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="blis-sim",
                     description="Battery-less IoT network simulator")
    sub = parser.add_subparsers(dest="command")

    p_run = sub.add_parser("run", help="run one scenario config")
    p_run.add_argument("--config", required=True, help="scenario JSON file")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--format", choices=["csv", "json", "both"], default="both")
    p_run.add_argument("--plot", action="store_true")

    p_cmp = sub.add_parser("compare", help="paired strategy sweep")
    p_cmp.add_argument("--configs", required=True, help="glob of scenario JSON files")
    p_cmp.add_argument("--seeds", required=True, help="comma-separated seed list")
    p_cmp.add_argument("--strategies", default=",".join(STRATEGY_LABELS))
    p_cmp.add_argument("--baseline", default="atem+vsda")
    p_cmp.add_argument("--out", default="out")
    p_cmp.add_argument("--format", choices=["csv", "json", "both"], default="both")
    p_cmp.add_argument("--plot", action="store_true")

    p_fc = sub.add_parser("forecast", help="train/evaluate a forecaster on a trace")
    p_fc.add_argument("--trace", required=True, help="time_s,power_mw CSV")
    p_fc.add_argument("--model", choices=["lstm", "ewma", "persistence"], default="lstm")
    p_fc.add_argument("--window", type=int, default=10)
    p_fc.add_argument("--epochs", type=int, default=400)
    p_fc.add_argument("--hidden", type=int, default=32)
    p_fc.add_argument("--seed", type=int, default=0)
    p_fc.add_argument("--smoothing", type=float, default=0.5)
    p_fc.add_argument("--out", default="out")

    p_codec = sub.add_parser("codec", help="decode a packet hex dump")
    p_codec.add_argument("--hex", required=True, help="packet bytes as hex")
    return parser


def _cmd_run(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        config = json.load(fh)
    if args.seed is not None:
        config["seed"] = args.seed
    scenario = build_scenario(config)
    log = run(scenario)
    bundle = compute_metrics(log, scenario)
    os.makedirs(args.out, exist_ok=True)
    log.write(os.path.join(args.out, "events.log"))
    label = (f"{config.get('devices', {}).get('strategy', 'atem')}"
             f"+{config.get('aggregator', {}).get('scheme', 'vsda')}")
    report = ComparisonReport(baseline=label)
    report.rows.append(_row(scenario.name, label, scenario.seed, bundle))
    written = emit_outputs(report, args.format, args.out, plot=args.plot)
    print(f"scenario {scenario.name} seed {scenario.seed}: "
          f"data_loss={bundle.data_loss:.4f} "
          f"delay={bundle.mean_packet_delay_s if bundle.mean_packet_delay_s is not None else 'n/a'} "
          f"availability={bundle.availability_mean:.4f}")
    for path in [os.path.join(args.out, 'events.log')] + written:
        print(f"wrote {path}")
    return 0


def _cmd_compare(args) -> int:
    paths = sorted(globlib.glob(args.configs))
    if not paths:
        raise ConfigError("configs", f"no files match {args.configs!r}")
    configs = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            configs.append(json.load(fh))
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    report = compare(configs, strategies, seeds, baseline=args.baseline)
    written = emit_outputs(report, args.format, args.out, plot=args.plot)
    for key, agg in report.summary.items():
        loss = agg.get("data_loss", {}).get("mean")
        avail = agg.get("availability_mean", {}).get("mean")
        print(f"{key}: data_loss={loss if loss is not None else 'n/a'} "
              f"availability={avail if avail is not None else 'n/a'}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_forecast(args) -> int:
    trace = load_trace_csv(args.trace)
    os.makedirs(args.out, exist_ok=True)
    if args.model == "lstm":
        model = train(trace, TrainConfig(epochs=args.epochs, window=args.window,
                                         hidden_size=args.hidden, seed=args.seed))
        loss_path = os.path.join(args.out, "loss.csv")
        with open(loss_path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for i, tl in enumerate(model.loss_history, start=1):
                vl = model.val_loss_history[i - 1] if i <= len(model.val_loss_history) else ""
                fh.write(f"{i},{tl!r},{vl!r}\n")
        print(f"wrote {loss_path}")
    elif args.model == "ewma":
        model = ewma_model(smoothing=args.smoothing, window=args.window)
    else:
        model = persistence_model(window=args.window)
    preds, actual = one_step_predictions(model, trace.powers)
    pred_path = os.path.join(args.out, "predictions.csv")
    with open(pred_path, "w", encoding="utf-8") as fh:
        fh.write("t,actual_mw,predicted_mw\n")
        for i, (a, p) in enumerate(zip(actual, preds)):
            t = trace.times[model.window + i]
            fh.write(f"{t!r},{a!r},{p!r}\n")
    print(f"wrote {pred_path}")
    print(f"{args.model} one-step RMSE: {rmse(preds, actual):.6f} mW "
          f"over {len(preds)} predictions")
    return 0


def _cmd_codec(args) -> int:
    try:
        raw = bytes.fromhex(args.hex.replace(" ", "").replace(":", ""))
    except ValueError:
        raise UsageError(f"--hex is not valid hexadecimal: {args.hex!r}") from None
    print(describe_packet(raw))
    return 0


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "forecast":
            return _cmd_forecast(args)
        if args.command == "codec":
            return _cmd_codec(args)
        return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, MetricsError, TraceFormatError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (Malformed, ForecastError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
