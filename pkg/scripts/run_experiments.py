#!/usr/bin/env python3
"""Reproduce the full comparative study: the three LP-proportion scenarios
under all four strategy pairings, plus the two focused comparison regimes
(energy-management schemes, and state-aware vs polling aggregation).

Writes comparison.csv / comparison.json (and plots with --plot) per study
into the output directory. Seeds are paired across strategies throughout.

Usage:
    python scripts/run_experiments.py [--seeds 1,2,3,4,5] [--out results]
                                      [--plot] [--quick]
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from blis_sim.metrics import STRATEGY_LABELS, compare, emit_outputs  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def load(name):
    with open(os.path.join(CONFIG_DIR, name), encoding="utf-8") as fh:
        return json.load(fh)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="1,2,3,4,5")
    parser.add_argument("--out", default="results")
    parser.add_argument("--plot", action="store_true")
    parser.add_argument("--quick", action="store_true",
                        help="shorten the table scenarios to one period")
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    # Study 1: the three LP-proportion scenarios under every strategy pairing.
    table_cfgs = [load(f"{n}.json") for n in
                  ("scenario1_lp100", "scenario2_mixed", "scenario3_nml100")]
    if args.quick:
        for cfg in table_cfgs:
            cfg["duration_s"] = 3600.0
    print(f"study 1: {len(table_cfgs)} scenarios x {len(STRATEGY_LABELS)} "
          f"strategies x {len(seeds)} seeds")
    report = compare(table_cfgs, list(STRATEGY_LABELS), seeds, baseline="atem+vsda")
    out = os.path.join(args.out, "table_scenarios")
    for path in emit_outputs(report, "both", out, plot=args.plot):
        print(f"  wrote {path}")

    # Study 2: energy-management schemes on intermittent bursts (availability
    # and available-initial-time), same hardware for every strategy.
    cfg = load("compare_energy.json")
    print("study 2: energy strategies on bursty power")
    report = compare([cfg], ["atem+vsda", "fh+vsda", "central+vsda"], seeds,
                     baseline="atem+vsda")
    out = os.path.join(args.out, "energy_strategies")
    for path in emit_outputs(report, "both", out, plot=args.plot):
        print(f"  wrote {path}")

    # Study 3: state-aware aggregation vs blind polling (loss and delay),
    # run both with symmetric no-reattempt policy and with the default
    # reattempt budget so the salvage/loss trade is visible.
    cfg = load("compare_aggregation.json")
    print("study 3: aggregation schemes, reattempt_limit=0 and default 3")
    for limit, tag in ((0, "no_reattempts"), (3, "reattempts")):
        cfg_l = json.loads(json.dumps(cfg))
        cfg_l["aggregator"]["reattempt_limit"] = limit
        cfg_l["name"] = f"compare_aggregation_{tag}"
        report = compare([cfg_l], ["atem+vsda", "atem+polling"], seeds,
                         baseline="atem+polling")
        out = os.path.join(args.out, f"aggregation_{tag}")
        for path in emit_outputs(report, "both", out, plot=args.plot):
            print(f"  wrote {path}")

    print("done")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
