"""Headline metrics from event logs, paired strategy sweeps, and emission.

Metric operationalisations (the shorthand names are defined in
docs/metrics.md):

* data_loss      -- solicitations that never produced a reading (reattempts
                    exhausted or cut off by a period boundary) divided by all
                    resolved solicitations.
* packet delay   -- soliciting-beacon first emission to sensor-packet receipt,
                    averaged over delivered readings.
* availability   -- per component, the fraction of time its backing buffer
                    held at least that component's task cost.
* available_initial_time -- first instant of availability per component;
                    devices that never become available count as the run
                    duration when averaging.
* achieved_rate  -- readings collected per period, against the period's
                    targets.

Comparison sweeps pair runs seed-by-seed: a delta is only ever computed
between two runs of identical (scenario, seed).
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .engine import EventLog, Scenario, build_scenario, run

SCHEMA_VERSION = 1

# External reference values the comparison report tracks (not asserted):
# relative availability gain, earlier availability, and loss/delay reductions
# reported for this protocol family on measured irradiance datasets.
REFERENCE_TARGETS = {
    "availability_gain_pct_min": 15.28,
    "available_sooner_s_min": 22.4,
    "data_loss_reduction_pct": 99.04,
    "delay_reduction_pct": 94.96,
}

STRATEGY_LABELS = ("atem+vsda", "fh+vsda", "central+vsda", "atem+polling")


class MetricsError(Exception):
    pass


class MalformedLog(MetricsError):
    """Unparseable event-log record; message carries the record number."""


@dataclass
class MetricsBundle:
    data_loss: float
    mean_packet_delay_s: float | None
    availability: dict[str, float]                 # component -> mean fraction
    availability_per_device: dict[str, dict[str, float]]
    available_initial_s: dict[str, float | None]   # component -> mean first instant
    initial_per_device: dict[str, dict[str, float | None]]
    achieved_rate: dict[int, dict]                 # app -> period accounting
    solicitations: int
    losses: int
    stale: int
    reattempts: int
    infeasible_events: int
    duration_s: float
    audits: dict[str, dict[str, float]]

    @property
    def availability_mean(self) -> float:
        vals = list(self.availability.values())
        return sum(vals) / len(vals) if vals else 0.0

    @property
    def initial_time_mean_s(self) -> float:
        vals = [v if v is not None else self.duration_s
                for v in self.available_initial_s.values()]
        return sum(vals) / len(vals) if vals else self.duration_s

    @property
    def achieved_total(self) -> float:
        periods = [sum(p["achieved_mean"]) for p in self.achieved_rate.values()]
        return sum(periods)

    @property
    def target_total(self) -> float:
        periods = [sum(p["target_mean"]) for p in self.achieved_rate.values()]
        return sum(periods)


def _parse_detail(detail: str) -> dict[str, str]:
    out = {}
    if detail:
        for part in detail.split(" "):
            if "=" in part:
                key, value = part.split("=", 1)
                out[key] = value
    return out


def parse_log_lines(lines) -> list[tuple[int, str, str, str]]:
    records = []
    for i, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line:
            continue
        parts = line.split(",", 3)
        if len(parts) != 4:
            raise MalformedLog(f"record {i}: expected 4 comma-separated fields")
        try:
            t = int(parts[0])
        except ValueError:
            raise MalformedLog(f"record {i}: bad timestamp {parts[0]!r}") from None
        records.append((t, parts[1], parts[2], parts[3]))
    return records


def compute_metrics(log, scenario: Scenario | None = None) -> MetricsBundle:
    """Deterministic metrics from an EventLog (or iterable of log lines)."""
    if isinstance(log, EventLog):
        records = log.records
    else:
        records = parse_log_lines(log)
    if not records:
        return MetricsBundle(0.0, None, {}, {}, {}, {}, {}, 0, 0, 0, 0, 0, 0.0, {})

    end_us = records[-1][0]
    duration_s = end_us / 1e6

    solicitations = losses = stale = reattempts = infeasible = 0
    delays: list[float] = []
    achieved: dict[int, list[tuple[tuple[int, ...], tuple[int, ...]]]] = {}
    avail_state: dict[tuple[str, str], tuple[int, int]] = {}  # (dev, comp) -> (on, since)
    avail_total: dict[tuple[str, str], int] = {}
    avail_first: dict[tuple[str, str], int | None] = {}
    audits: dict[str, dict[str, float]] = {}

    for rec_no, (t, entity, event, detail) in enumerate(records, start=1):
        if entity == "agg":
            d = _parse_detail(detail)
            if event == "solicit":
                solicitations += 1
            elif event == "solicit_ok":
                try:
                    delays.append(float(d["delay_s"]))
                except (KeyError, ValueError):
                    raise MalformedLog(f"record {rec_no}: solicit_ok without delay_s") from None
            elif event == "solicit_lost":
                losses += 1
            elif event == "stale":
                stale += 1
            elif event == "reattempt":
                reattempts += 1
            elif event == "infeasible_rate":
                infeasible += 1
            elif event == "period":
                try:
                    app = int(d["app"])
                    ach = _parse_tuple(d["achieved"])
                    tgt = _parse_tuple(d["targets"])
                except (KeyError, ValueError):
                    raise MalformedLog(f"record {rec_no}: bad period record") from None
                achieved.setdefault(app, []).append((ach, tgt))
        elif entity.startswith("dev:"):
            if event == "avail":
                d = _parse_detail(detail)
                try:
                    comp, on = d["comp"], d["on"] == "1"
                except KeyError:
                    raise MalformedLog(f"record {rec_no}: bad avail record") from None
                key = (entity, comp)
                prev = avail_state.get(key)
                if prev is not None and prev[0] and not on:
                    avail_total[key] = avail_total.get(key, 0) + (t - prev[1])
                if on and avail_first.get(key) is None:
                    avail_first[key] = t
                avail_state[key] = (1 if on else 0, t)
                avail_total.setdefault(key, 0)
                avail_first.setdefault(key, avail_first.get(key))
            elif event == "audit":
                d = _parse_detail(detail)
                audits[entity] = {k: float(v) for k, v in d.items()}

    # close open availability intervals at the end of the run
    for key, (on, since) in avail_state.items():
        if on:
            avail_total[key] = avail_total.get(key, 0) + (end_us - since)

    comps = sorted({comp for (_, comp) in avail_total})
    availability_per_device: dict[str, dict[str, float]] = {}
    initial_per_device: dict[str, dict[str, float | None]] = {}
    for (dev, comp), total in sorted(avail_total.items()):
        availability_per_device.setdefault(dev, {})[comp] = total / max(end_us, 1)
    for (dev, comp), first in sorted(avail_first.items()):
        initial_per_device.setdefault(dev, {})[comp] = (
            first / 1e6 if first is not None else None)

    availability = {}
    available_initial = {}
    for comp in comps:
        fracs = [v[comp] for v in availability_per_device.values() if comp in v]
        availability[comp] = sum(fracs) / len(fracs) if fracs else 0.0
        firsts = [(v[comp] if v[comp] is not None else duration_s)
                  for v in initial_per_device.values() if comp in v]
        available_initial[comp] = sum(firsts) / len(firsts) if firsts else None

    achieved_rate = {}
    for app, periods in sorted(achieved.items()):
        n = len(periods)
        width = len(periods[0][0])
        achieved_mean = tuple(sum(p[0][j] for p in periods) / n for j in range(width))
        target_mean = tuple(sum(p[1][j] for p in periods) / n for j in range(width))
        achieved_rate[app] = {
            "periods": n,
            "achieved_mean": achieved_mean,
            "target_mean": target_mean,
            "achieved_per_period": [list(p[0]) for p in periods],
            "targets_per_period": [list(p[1]) for p in periods],
        }

    resolved = len(delays) + losses
    return MetricsBundle(
        data_loss=(losses / resolved) if resolved else 0.0,
        mean_packet_delay_s=(sum(delays) / len(delays)) if delays else None,
        availability=availability,
        availability_per_device=availability_per_device,
        available_initial_s=available_initial,
        initial_per_device=initial_per_device,
        achieved_rate=achieved_rate,
        solicitations=solicitations,
        losses=losses,
        stale=stale,
        reattempts=reattempts,
        infeasible_events=infeasible,
        duration_s=duration_s,
        audits=audits,
    )


def _parse_tuple(text: str) -> tuple[int, ...]:
    inner = text.strip("()")
    if not inner:
        return ()
    return tuple(int(x) for x in inner.split(","))


def check_conservation(bundle: MetricsBundle, rel_tol: float = 1e-6) -> dict[str, float]:
    """Per-device audit residuals, relative to the energy actually moved."""
    residuals = {}
    for dev, a in bundle.audits.items():
        lhs = a["inflow"] - a["leak"] - a["overflow"] - a["tasks"] - a["overhead"]
        scale = max(abs(a["inflow"]), abs(a["d_e"]), 1e-12)
        residuals[dev] = abs(lhs - a["d_e"]) / scale
    return residuals


# ---------------------------------------------------------------------------
# Strategy sweeps
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    baseline: str
    rows: list[dict] = field(default_factory=list)       # one per scenario x strategy x seed
    deltas: list[dict] = field(default_factory=list)     # paired against the baseline
    summary: dict = field(default_factory=dict)          # per scenario x strategy aggregates
    reference_targets: dict = field(default_factory=lambda: dict(REFERENCE_TARGETS))


def apply_strategy(config: dict, label: str) -> dict:
    """Overlay a 'device+aggregator' strategy label onto a scenario config."""
    if "+" not in label:
        raise MetricsError(f"strategy label {label!r} must look like 'atem+vsda'")
    device_part, agg_part = label.split("+", 1)
    cfg = json.loads(json.dumps(config))  # deep copy, keeps configs JSON-safe
    cfg.setdefault("devices", {})["strategy"] = device_part
    cfg.setdefault("aggregator", {})["scheme"] = agg_part
    return cfg


def run_one(config: dict, strategy: str, seed: int) -> tuple[EventLog, Scenario, MetricsBundle]:
    cfg = apply_strategy(config, strategy)
    cfg["seed"] = seed
    scenario = build_scenario(cfg)
    log = run(scenario)
    return log, scenario, compute_metrics(log, scenario)


def _row(scenario_name: str, strategy: str, seed: int, m: MetricsBundle) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario_name,
        "strategy": strategy,
        "seed": seed,
        "data_loss": m.data_loss,
        "mean_delay_s": m.mean_packet_delay_s,
        "availability_mcu": m.availability.get("mcu_sense", 0.0),
        "availability_radio": m.availability.get("radio", 0.0),
        "availability_mean": m.availability_mean,
        "initial_time_mcu_s": m.available_initial_s.get("mcu_sense"),
        "initial_time_radio_s": m.available_initial_s.get("radio"),
        "initial_time_mean_s": m.initial_time_mean_s,
        "achieved_total": m.achieved_total,
        "target_total": m.target_total,
        "solicitations": m.solicitations,
        "losses": m.losses,
        "stale": m.stale,
        "reattempts": m.reattempts,
        "infeasible": m.infeasible_events,
    }


def compare(configs: list[dict], strategies: list[str], seeds: list[int],
            baseline: str = "atem+vsda") -> ComparisonReport:
    """Paired sweep: every strategy runs every (scenario, seed) pair."""
    if not seeds:
        raise MetricsError("need at least one seed")
    if baseline not in strategies:
        raise MetricsError(f"baseline {baseline!r} missing from strategies")
    jobs = [(cfg, strategy, seed)
            for cfg in configs for strategy in strategies for seed in seeds]
    workers = max(1, int(os.environ.get("BLIS_SIM_THREADS", "1")))
    results: dict[tuple[str, str, int], MetricsBundle] = {}

    def _execute(job):
        cfg, strategy, seed = job
        _, scenario, bundle = run_one(cfg, strategy, seed)
        return (scenario.name, strategy, seed), bundle

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for key, bundle in pool.map(_execute, jobs):
                results[key] = bundle
    else:
        for job in jobs:
            key, bundle = _execute(job)
            results[key] = bundle

    report = ComparisonReport(baseline=baseline)
    names = sorted({name for name, _, _ in results})
    for name in names:
        for strategy in strategies:
            for seed in seeds:
                report.rows.append(_row(name, strategy, seed, results[(name, strategy, seed)]))

    for name in names:
        for strategy in strategies:
            if strategy == baseline:
                continue
            for seed in seeds:
                a = results[(name, strategy, seed)]
                b = results[(name, baseline, seed)]
                report.deltas.append({
                    "scenario": name, "strategy": strategy, "baseline": baseline,
                    "seed": seed,
                    "data_loss_delta": a.data_loss - b.data_loss,
                    "mean_delay_delta_s": _delta(a.mean_packet_delay_s,
                                                 b.mean_packet_delay_s),
                    "availability_delta": a.availability_mean - b.availability_mean,
                    "initial_time_delta_s": a.initial_time_mean_s - b.initial_time_mean_s,
                })

    for name in names:
        for strategy in strategies:
            rows = [r for r in report.rows
                    if r["scenario"] == name and r["strategy"] == strategy]
            agg = {}
            for metric in ("data_loss", "mean_delay_s", "availability_mean",
                           "initial_time_mean_s", "achieved_total"):
                vals = [r[metric] for r in rows if r[metric] is not None]
                if vals:
                    agg[metric] = {"mean": sum(vals) / len(vals),
                                   "min": min(vals), "max": max(vals)}
            report.summary[f"{name}/{strategy}"] = agg
    return report


def _delta(a, b):
    if a is None or b is None:
        return None
    return a - b


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["schema_version", "scenario", "strategy", "seed", "data_loss",
               "mean_delay_s", "availability_mcu", "availability_radio",
               "availability_mean", "initial_time_mcu_s", "initial_time_radio_s",
               "initial_time_mean_s", "achieved_total", "target_total",
               "solicitations", "losses", "stale", "reattempts", "infeasible"]


def emit_outputs(report: ComparisonReport, fmt: str, out_dir: str,
                 plot: bool = False) -> list[str]:
    """Write the report as CSV and/or JSON; optional bar plots per metric."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        path = os.path.join(out_dir, "comparison.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in report.rows:
                writer.writerow({k: row.get(k) for k in CSV_COLUMNS})
        written.append(path)
    if fmt in ("json", "both"):
        path = os.path.join(out_dir, "comparison.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(report), fh, indent=2)
        written.append(path)
    if plot:
        written.extend(_emit_plots(report, out_dir))
    return written


def _emit_plots(report: ComparisonReport, out_dir: str) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    metrics = [("data_loss", "Data loss (fraction)"),
               ("mean_delay_s", "Mean packet delay (s)"),
               ("availability_mean", "Availability (fraction of time)"),
               ("initial_time_mean_s", "Available-initial-time (s)")]
    for metric, label in metrics:
        groups: dict[str, list[float]] = {}
        for row in report.rows:
            if row[metric] is None:
                continue
            groups.setdefault(f"{row['scenario']}\n{row['strategy']}", []).append(row[metric])
        if not groups:
            continue
        fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(groups)), 4))
        names = list(groups)
        means = [sum(v) / len(v) for v in groups.values()]
        ax.bar(range(len(names)), means)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, fontsize=7)
        ax.set_ylabel(label)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
