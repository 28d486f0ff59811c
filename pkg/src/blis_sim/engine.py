"""Deterministic discrete-event simulation of devices, channels, aggregator.

Times are integer microseconds; the event queue orders by (time, insertion
sequence), so identical (scenario, seed) pairs replay byte-identically.

Energy evolves on a fixed slot grid (the slotted recurrence is ground truth)
but the engine never iterates slot by slot: between events each device's
buffers advance in closed form across the piecewise-constant trace segments,
and threshold crossings (task energies, availability costs) are solved
analytically and scheduled as wake events on exact slot boundaries.
Equivalence with per-slot stepping is property-tested in the energy module.

Radio rule: a broadcast beacon reaches a device iff that device's Receive
task is in Running (radio listening) at the arrival instant and no scripted
off-window covers it; the aggregator is mains-powered and never misses an
uplink packet.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .aggregator import (
    Aggregator,
    AggregatorConfig,
    AggregatorScheme,
    AppSpec,
    StaleReply,
)
from .device import (
    CENTRAL_BUFFER,
    DEFAULT_ENERGY_THRESHOLD_J,
    RADIO_BUFFER,
    SENSE_BUFFER,
    DeviceRuntime,
    DeviceState,
    EnergyStrategy,
    TaskKind,
    TaskState,
    complete_task,
    default_buffers,
    execute_task,
    select_device_state,
    step_task_manager,
)
from .energy import EnergyBuffer, HarvesterTrace, advance_buffer, load_trace_csv
from .forecaster import (
    ForecastModel,
    StateEstimateParams,
    TrainConfig,
    ewma_model,
    persistence_model,
    train,
)
from .protocol import (
    SensorDataMsg,
    SensorDataPacket,
    SensorReading,
    decode_sensor_packet,
    encode_beacon,
    encode_sensor_packet,
    scale_value,
)


class ConfigError(Exception):
    """Scenario configuration rejected; message names the offending field."""

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")


class EventKind(Enum):
    BEACON_DUE = "beacon_due"
    PACKET_ARRIVAL = "packet_arrival"
    TASK_COMPLETE = "task_complete"
    ENERGY_SLOT = "energy_slot"
    PERIOD_ROLLOVER = "period_rollover"
    TRACE_END = "trace_end"


# availability components and the buffer/cost they are measured against
COMP_MCU = "mcu_sense"
COMP_RADIO = "radio"

# wake thresholds sit a hair above the cost so the strict > guards pass
WAKE_MARGIN = 1e-9


class EventLog:
    """Append-only run log: ``time_us,entity,event,detail`` per record."""

    def __init__(self):
        self.records: list[tuple[int, str, str, str]] = []

    def add(self, time_us: int, entity: str, event: str, **detail) -> None:
        parts = []
        for key, value in detail.items():
            if isinstance(value, float):
                value = repr(value)
            elif isinstance(value, tuple):
                value = "(" + ",".join(str(v) for v in value) + ")"
            parts.append(f"{key}={value}")
        self.records.append((time_us, entity, event, " ".join(parts)))

    def lines(self) -> list[str]:
        return [f"{t},{entity},{event},{detail}"
                for t, entity, event, detail in self.records]

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text())


# ---------------------------------------------------------------------------
# Scenario construction
# ---------------------------------------------------------------------------

@dataclass
class DeviceConfig:
    strategy: EnergyStrategy = EnergyStrategy.ATEM
    split_high: float = 0.7
    split_low: float = 0.3
    energy_threshold_j: float = DEFAULT_ENERGY_THRESHOLD_J
    sense_capacitance: float = 47e-6
    radio_capacitance: float = 220e-6
    parallel_resistance: float = 10_000.0
    efficiency: float = 0.9
    leakage_fraction: float = 0.01
    initial_sense_j: float = 0.0
    initial_radio_j: float = 0.0


@dataclass
class DeviceSim:
    """Engine-side wrapper: runtime plus trace, clock, and accounting."""

    rt: DeviceRuntime
    trace: HarvesterTrace
    slot_us: int
    synced_slot: int = 0
    gen: int = 0                        # invalidates stale wake events
    off_windows_us: list[tuple[int, int]] = field(default_factory=list)
    pending_beacon: Any = None
    inflight_reply_seq: int | None = None
    last_answered_seq: int | None = None
    sensed_value_mw: float = 0.0
    sensed_at_ms: int = 0
    # audit totals (joules)
    inflow: float = 0.0
    leak: float = 0.0
    overflow: float = 0.0
    initial_energy: float = 0.0
    # availability per component
    avail: dict[str, bool] = field(default_factory=dict)
    avail_since_us: dict[str, int] = field(default_factory=dict)
    avail_total_us: dict[str, int] = field(default_factory=dict)
    avail_first_us: dict[str, int | None] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"dev:{self.rt.app_id}.{self.rt.module_id}"

    @property
    def slot_s(self) -> float:
        return self.slot_us / 1e6

    @property
    def trace_end_us(self) -> int:
        return int(round(self.trace.end_time * 1e6))

    def component_map(self) -> list[tuple[str, str, float]]:
        """(component, buffer name, availability cost in joules)."""
        sense_cost = self.rt.costs[TaskKind.SENSE].energy_j
        radio_cost = self.rt.costs[TaskKind.RECEIVE].energy_j
        if self.rt.strategy == EnergyStrategy.CENTRAL:
            return [(COMP_MCU, CENTRAL_BUFFER, sense_cost),
                    (COMP_RADIO, CENTRAL_BUFFER, radio_cost)]
        return [(COMP_MCU, SENSE_BUFFER, sense_cost),
                (COMP_RADIO, RADIO_BUFFER, radio_cost)]

    def radio_off_at(self, t_us: int) -> bool:
        return any(start <= t_us < end for start, end in self.off_windows_us)

    def power_at_slot(self, slot: int) -> float:
        t = slot * self.slot_s
        idx = int((t - self.trace.start_time) / self.trace.sample_interval)
        idx = max(0, min(idx, len(self.trace.powers) - 1))
        return self.trace.powers[idx]

    def segment_end_slot(self, slot: int) -> int:
        t = slot * self.slot_s
        idx = int((t - self.trace.start_time) / self.trace.sample_interval)
        seg_end_s = self.trace.start_time + (idx + 1) * self.trace.sample_interval
        return int(round(seg_end_s / self.slot_s))

    def true_state(self) -> DeviceState:
        if self.rt.force_state is not None:
            return self.rt.force_state
        return select_device_state(self.rt.total_energy, self.rt.energy_threshold)


@dataclass
class Scenario:
    """One fully-instantiated world, ready to run."""

    name: str
    seed: int
    duration_us: int
    slot_us: int
    apps: list[AppSpec]
    devices: dict[tuple[int, int], DeviceSim]
    aggregator: Aggregator
    device_cfg: DeviceConfig
    lp_assigned: dict[tuple[int, int], bool]
    propagation_delay_us: int = 0

    @property
    def duration_s(self) -> float:
        return self.duration_us / 1e6


# -- trace synthesis ----------------------------------------------------------

def synth_trace(spec: dict, duration_s: float, seed: int) -> HarvesterTrace:
    kind = spec.get("kind", "constant")
    interval = float(spec.get("sample_interval_s", 1.0))
    n = int(math.ceil(duration_s / interval)) + 1
    times = tuple(i * interval for i in range(n))
    if kind == "constant":
        return HarvesterTrace(times, (float(spec.get("power_mw", 5.0)),) * n, interval)
    if kind == "sine":
        mean = float(spec.get("mean_mw", 5.0))
        amp = float(spec.get("amplitude_mw", 4.0))
        period = float(spec.get("period_s", 60.0))
        powers = tuple(max(0.0, mean + amp * math.sin(2 * math.pi * t / period))
                       for t in times)
        return HarvesterTrace(times, powers, interval)
    if kind == "bursts":
        rng = random.Random(seed)
        lo = float(spec.get("amplitude_lo_mw", 8.0))
        hi = float(spec.get("amplitude_hi_mw", 20.0))
        floor = float(spec.get("floor_mw", 0.0))
        burst = float(spec.get("burst_s", 4.0))
        gap = float(spec.get("gap_s", 8.0))
        jitter = spec.get("length_jitter", "exp")
        if jitter not in ("exp", "uniform"):
            raise ConfigError("trace.length_jitter", f"unknown jitter {jitter!r}")
        powers = []
        state_on, left = False, 0
        for _ in range(n):
            if left <= 0:
                state_on = not state_on
                mean_len = max(burst if state_on else gap, interval)
                if jitter == "exp":
                    length = rng.expovariate(1.0 / mean_len)
                else:
                    length = rng.uniform(0.6 * mean_len, 1.4 * mean_len)
                left = max(1, int(round(length / interval)))
                amp = rng.uniform(lo, hi)
            powers.append(floor + (amp if state_on else 0.0))
            left -= 1
        return HarvesterTrace(times, tuple(powers), interval)
    if kind == "csv":
        return load_trace_csv(spec["path"])
    raise ConfigError("trace.kind", f"unknown trace kind {kind!r}")


def _trace_for_device(cfg: dict, app_id: int, module_id: int,
                      duration_s: float, seed: int) -> HarvesterTrace:
    dev_seed = seed * 10007 + app_id * 101 + module_id
    return synth_trace(cfg, duration_s, dev_seed)


def steady_state_energy(trace: HarvesterTrace, dcfg: DeviceConfig,
                        slot_s: float, max_samples: int = 600) -> float:
    """Time-averaged total stored energy over the settled half of the trace,
    charging from empty with the idle split.

    The per-slot decay constant makes the recurrence settle within seconds,
    so a bounded prefix of the trace is representative.
    """
    buffers = _make_buffers(dcfg)
    if dcfg.strategy == EnergyStrategy.CENTRAL:
        shares = {CENTRAL_BUFFER: 1.0}
    elif dcfg.strategy == EnergyStrategy.FH:
        shares = {SENSE_BUFFER: 0.5, RADIO_BUFFER: 0.5}
    else:
        shares = {SENSE_BUFFER: dcfg.split_low, RADIO_BUFFER: dcfg.split_high}
    powers = trace.powers[:max_samples]
    half = len(powers) // 2
    slots_per_sample = max(1, int(round(trace.sample_interval / slot_s)))
    acc = 0.0
    count = 0
    for i, p in enumerate(powers):
        for name, share in shares.items():
            res = advance_buffer(buffers[name], share * p, slot_s, slots_per_sample)
            buffers[name] = buffers[name].with_energy(res.energy)
        if i >= half:
            acc += sum(b.energy for b in buffers.values())
            count += 1
    return acc / max(count, 1)


def lp_scale_factor(trace: HarvesterTrace, dcfg: DeviceConfig, slot_s: float,
                    target_j: float) -> float:
    """Bisect a trace scale so steady-state stored energy lands at target."""
    base = steady_state_energy(trace, dcfg, slot_s)
    if base <= target_j:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(22):
        mid = 0.5 * (lo + hi)
        if steady_state_energy(trace.scaled(mid), dcfg, slot_s) > target_j:
            hi = mid
        else:
            lo = mid
    return lo


def _make_buffers(dcfg: DeviceConfig) -> dict[str, EnergyBuffer]:
    return default_buffers(
        dcfg.strategy,
        sense_capacitance=dcfg.sense_capacitance,
        radio_capacitance=dcfg.radio_capacitance,
        parallel_resistance=dcfg.parallel_resistance,
        efficiency=dcfg.efficiency,
        leakage_fraction=dcfg.leakage_fraction,
    )


# -- config parsing ------------------------------------------------------------

def _require(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ConfigError(f"{path}.{key}", "missing required field")
    return cfg[key]


def parse_device_config(cfg: dict, path: str = "devices") -> DeviceConfig:
    try:
        strategy = EnergyStrategy(cfg.get("strategy", "atem"))
    except ValueError:
        raise ConfigError(f"{path}.strategy", f"unknown strategy {cfg.get('strategy')!r}") from None
    dcfg = DeviceConfig(
        strategy=strategy,
        split_high=float(cfg.get("split_high", 0.7)),
        split_low=float(cfg.get("split_low", 0.3)),
        energy_threshold_j=float(cfg.get("energy_threshold_uj", 359.776)) / 1e6,
        sense_capacitance=float(cfg.get("sense_capacitance_uf", 47.0)) / 1e6,
        radio_capacitance=float(cfg.get("radio_capacitance_uf", 220.0)) / 1e6,
        parallel_resistance=float(cfg.get("parallel_resistance_ohm", 10_000.0)),
        efficiency=float(cfg.get("efficiency", 0.9)),
        leakage_fraction=float(cfg.get("leakage_fraction", 0.01)),
        initial_sense_j=float(cfg.get("initial_sense_uj", 0.0)) / 1e6,
        initial_radio_j=float(cfg.get("initial_radio_uj", 0.0)) / 1e6,
    )
    if not 0 < dcfg.split_low < dcfg.split_high < 1:
        raise ConfigError(f"{path}.split_high", "need 0 < split_low < split_high < 1")
    if abs(dcfg.split_high + dcfg.split_low - 1.0) > 1e-9:
        raise ConfigError(f"{path}.split_high", "splits must sum to 1")
    if dcfg.energy_threshold_j <= 0:
        raise ConfigError(f"{path}.energy_threshold_uj", "must be positive")
    return dcfg


def build_scenario(config: dict) -> Scenario:
    """Validate a scenario dict and instantiate devices plus aggregator."""
    name = str(config.get("name", "scenario"))
    seed = int(config.get("seed", 0))
    duration_s = float(_require(config, "duration_s", "scenario"))
    if duration_s <= 0:
        raise ConfigError("duration_s", "must be positive")
    slot_s = float(config.get("slot_s", 0.01))
    if slot_s <= 0:
        raise ConfigError("slot_s", "must be positive")
    slot_us = int(round(slot_s * 1e6))

    apps_cfg = _require(config, "apps", "scenario")
    if not isinstance(apps_cfg, list):
        raise ConfigError("apps", "need a list of application specs")
    specs = []
    for i, app in enumerate(apps_cfg):
        try:
            specs.append(AppSpec(
                app_id=int(_require(app, "app_id", f"apps[{i}]")),
                module_count=int(_require(app, "modules", f"apps[{i}]")),
                rate_nml=float(_require(app, "rate_nml", f"apps[{i}]")),
                rate_lp=float(_require(app, "rate_lp", f"apps[{i}]")),
                period_s=float(app.get("period_s", 3600.0)),
                sensors_per_module=int(app.get("sensors_per_module", 1)),
            ))
        except ValueError as exc:
            raise ConfigError(f"apps[{i}]", str(exc)) from None

    dcfg = parse_device_config(config.get("devices", {}))
    trace_cfg = config.get("trace", {"kind": "constant", "power_mw": 5.0})
    interval_us = int(round(float(trace_cfg.get("sample_interval_s", 1.0)) * 1e6))
    if interval_us % slot_us != 0:
        raise ConfigError("slot_s", "slot must divide the trace sample interval")

    lp_fraction = float(config.get("lp_fraction", 0.0))
    if not 0.0 <= lp_fraction <= 1.0:
        raise ConfigError("lp_fraction", "must be in [0, 1]")
    lp_mode = config.get("lp_mode", "attenuate")
    if lp_mode not in ("attenuate", "clamp"):
        raise ConfigError("lp_mode", f"unknown mode {lp_mode!r}")
    lp_ss_fraction = float(config.get("lp_ss_fraction", 0.8))
    if not 0.0 < lp_ss_fraction <= 1.0:
        raise ConfigError("lp_ss_fraction", "must be in (0, 1]")

    overrides = {}
    for i, ov in enumerate(config.get("device_overrides", [])):
        key = (int(_require(ov, "app_id", f"device_overrides[{i}]")),
               int(_require(ov, "module_id", f"device_overrides[{i}]")))
        overrides[key] = ov

    devices: dict[tuple[int, int], DeviceSim] = {}
    lp_assigned: dict[tuple[int, int], bool] = {}
    for spec in specs:
        n_lp = int(round(lp_fraction * spec.module_count))
        for m in range(1, spec.module_count + 1):
            key = (spec.app_id, m)
            ov = overrides.get(key, {})
            tr_cfg = ov.get("trace", trace_cfg)
            trace = _trace_for_device(tr_cfg, spec.app_id, m, duration_s, seed)
            designated_lp = m <= n_lp
            force = None
            if "force_state" in ov:
                force = DeviceState(ov["force_state"]) if ov["force_state"] else None
            elif designated_lp and lp_mode == "clamp":
                force = DeviceState.LP
            if designated_lp and lp_mode == "attenuate" and force is None:
                scale = lp_scale_factor(trace, dcfg, slot_s,
                                        lp_ss_fraction * dcfg.energy_threshold_j)
                trace = trace.scaled(scale)
            lp_assigned[key] = designated_lp

            rt = DeviceRuntime(
                app_id=spec.app_id, module_id=m,
                strategy=dcfg.strategy,
                split_high=dcfg.split_high, split_low=dcfg.split_low,
                energy_threshold=dcfg.energy_threshold_j,
                rate_nml=spec.rate_nml, rate_lp=spec.rate_lp,
                sensors_per_module=spec.sensors_per_module,
                force_state=force,
                buffers=_make_buffers(dcfg),
            )
            if dcfg.strategy == EnergyStrategy.CENTRAL:
                total0 = float(ov.get("initial_sense_uj", dcfg.initial_sense_j * 1e6)) / 1e6 \
                    + float(ov.get("initial_radio_uj", dcfg.initial_radio_j * 1e6)) / 1e6
                rt.buffers[CENTRAL_BUFFER] = rt.buffers[CENTRAL_BUFFER].with_energy(total0)
            else:
                s0 = float(ov.get("initial_sense_uj", dcfg.initial_sense_j * 1e6)) / 1e6
                r0 = float(ov.get("initial_radio_uj", dcfg.initial_radio_j * 1e6)) / 1e6
                rt.buffers[SENSE_BUFFER] = rt.buffers[SENSE_BUFFER].with_energy(s0)
                rt.buffers[RADIO_BUFFER] = rt.buffers[RADIO_BUFFER].with_energy(r0)

            dev = DeviceSim(rt=rt, trace=trace, slot_us=slot_us)
            dev.initial_energy = rt.total_energy
            for start, end in ov.get("off_windows_s", []):
                dev.off_windows_us.append((int(round(start * 1e6)),
                                           int(round(end * 1e6))))
            devices[key] = dev

    agg_cfg_raw = config.get("aggregator", {})
    try:
        scheme = AggregatorScheme(agg_cfg_raw.get("scheme", "vsda"))
    except ValueError:
        raise ConfigError("aggregator.scheme",
                          f"unknown scheme {agg_cfg_raw.get('scheme')!r}") from None
    forecaster = agg_cfg_raw.get("forecaster", "oracle")
    acfg = AggregatorConfig(
        scheme=scheme,
        reattempt_limit=int(agg_cfg_raw.get("reattempt_limit", 3)),
        keepalive=bool(agg_cfg_raw.get("keepalive", True)),
        skip_lp=bool(agg_cfg_raw.get("skip_lp", True)),
        alpha_horizon=int(agg_cfg_raw.get("alpha_horizon", 100)),
        alpha_hysteresis=float(agg_cfg_raw.get("alpha_hysteresis", 0.01)),
        oracle=forecaster == "oracle",
    )
    if acfg.reattempt_limit < 0:
        raise ConfigError("aggregator.reattempt_limit", "must be >= 0")

    models: dict[int, ForecastModel] = {}
    if forecaster in ("ewma", "persistence", "lstm"):
        for (app_id, m), dev in devices.items():
            key = Aggregator._model_key(app_id, m)
            if forecaster == "ewma":
                models[key] = ewma_model(
                    smoothing=float(agg_cfg_raw.get("ewma_smoothing", 0.5)),
                    window=int(agg_cfg_raw.get("window", 4)))
            elif forecaster == "persistence":
                models[key] = persistence_model(int(agg_cfg_raw.get("window", 1)))
            else:
                tc = TrainConfig(
                    epochs=int(agg_cfg_raw.get("epochs", 100)),
                    window=int(agg_cfg_raw.get("window", 10)),
                    hidden_size=int(agg_cfg_raw.get("hidden_size", 16)),
                    seed=seed,
                )
                models[key] = train(dev.trace, tc)
    elif forecaster not in ("oracle", "none"):
        raise ConfigError("aggregator.forecaster", f"unknown forecaster {forecaster!r}")

    prop_delay_s = float(config.get("propagation_delay_s", 0.0))
    if prop_delay_s < 0:
        raise ConfigError("propagation_delay_s", "must be non-negative")
    scenario = Scenario(name=name, seed=seed,
                        duration_us=int(round(duration_s * 1e6)),
                        slot_us=slot_us, apps=specs, devices=devices,
                        aggregator=None, device_cfg=dcfg, lp_assigned=lp_assigned,
                        propagation_delay_us=int(round(prop_delay_s * 1e6)))

    def history_fn(app_id, module_id, now_s, window):
        dev = devices.get((app_id, module_id))
        if dev is None:
            return None
        tr = dev.trace
        idx = int((min(now_s, tr.end_time) - tr.start_time) / tr.sample_interval)
        idx = min(idx, len(tr.powers) - 1)
        if idx + 1 < window:
            return None
        return list(tr.powers[idx + 1 - window: idx + 1])

    def estimate_params_fn(app_id, module_id, last_energy_j, interval_s):
        central_equiv = EnergyBuffer(
            capacitance=dcfg.sense_capacitance + dcfg.radio_capacitance,
            parallel_resistance=dcfg.parallel_resistance,
            efficiency=dcfg.efficiency,
            leakage_fraction=dcfg.leakage_fraction,
        )
        return StateEstimateParams(
            buffer=central_equiv, threshold_j=dcfg.energy_threshold_j,
            slot_s=slot_us / 1e6, last_energy_j=last_energy_j,
            interval_s=interval_s)

    scenario.aggregator = Aggregator(
        specs, acfg, models=models,
        history_fn=history_fn,
        true_state_fn=None,   # wired by Sim, which owns device clocks
        estimate_params_fn=estimate_params_fn,
    )
    return scenario


# ---------------------------------------------------------------------------
# The simulation loop
# ---------------------------------------------------------------------------

class Sim:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.log = EventLog()
        self.now_us = 0
        self.end_us = scenario.duration_us
        self._heap: list[tuple[int, int, EventKind, tuple]] = []
        self._seq = 0
        self.stale_replies = 0
        scenario.aggregator.true_state_fn = self._true_state
        scenario.aggregator.observer = self._agg_observer

    # -- plumbing -------------------------------------------------------------

    def _push(self, time_us: int, kind: EventKind, payload: tuple) -> None:
        heapq.heappush(self._heap, (time_us, self._seq, kind, payload))
        self._seq += 1

    def _true_state(self, app_id: int, module_id: int, at_s: float) -> DeviceState:
        dev = self.sc.devices[(app_id, module_id)]
        at_us = int(round(at_s * 1e6))
        if at_us <= self.now_us:
            self._advance(dev, self.now_us)
            return dev.true_state()
        if dev.rt.force_state is not None:
            return dev.rt.force_state
        # charge-only projection of the stored energy to the target time
        self._advance(dev, self.now_us)
        total = 0.0
        slot_target = min(at_us, self.end_us, dev.trace_end_us) // dev.slot_us
        for name, buf in dev.rt.buffers.items():
            cur, slot = buf, dev.synced_slot
            while slot < slot_target:
                p = dev.power_at_slot(slot)
                share = dev.rt.harvest_shares(p)[name]
                k = min(slot_target, dev.segment_end_slot(slot)) - slot
                res = advance_buffer(cur, share, dev.slot_s, k)
                cur = cur.with_energy(res.energy)
                slot += k
            total += cur.energy
        return select_device_state(total, dev.rt.energy_threshold)

    def _agg_observer(self, event: str, app_id: int, detail: dict) -> None:
        self.log.add(self.now_us, "agg", event, app=app_id, **detail)

    # -- device energy/time ---------------------------------------------------

    def _advance(self, dev: DeviceSim, to_us: int) -> None:
        limit = min(to_us, self.end_us, dev.trace_end_us)
        target_slot = limit // dev.slot_us
        comps = dev.component_map()
        while dev.synced_slot < target_slot:
            p = dev.power_at_slot(dev.synced_slot)
            shares = dev.rt.harvest_shares(p)
            k = min(target_slot, dev.segment_end_slot(dev.synced_slot)) - dev.synced_slot
            if k <= 0:
                break
            for name, buf in list(dev.rt.buffers.items()):
                thresholds = tuple(cost for comp, bname, cost in comps if bname == name)
                comp_names = [comp for comp, bname, cost in comps if bname == name]
                res = advance_buffer(buf, shares[name], dev.slot_s, k, thresholds)
                dev.rt.buffers[name] = buf.with_energy(res.energy)
                dev.inflow += res.inflow
                dev.leak += res.leak
                dev.overflow += res.overflow
                for comp, rise, fall in zip(comp_names, res.rise_slots, res.fall_slots):
                    if rise is not None:
                        self._avail_toggle(dev, comp, True,
                                           (dev.synced_slot + rise) * dev.slot_us)
                    if fall is not None:
                        self._avail_toggle(dev, comp, False,
                                           (dev.synced_slot + fall) * dev.slot_us)
            dev.synced_slot += k

    def _avail_toggle(self, dev: DeviceSim, comp: str, on: bool, t_us: int) -> None:
        if dev.avail.get(comp, False) == on:
            return
        dev.avail[comp] = on
        if on:
            dev.avail_since_us[comp] = t_us
            if dev.avail_first_us.get(comp) is None:
                dev.avail_first_us[comp] = t_us
        else:
            dev.avail_total_us[comp] = dev.avail_total_us.get(comp, 0) \
                + (t_us - dev.avail_since_us.get(comp, t_us))
        self.log.add(t_us, dev.name, "avail", comp=comp, on=1 if on else 0)

    def _recheck_avail(self, dev: DeviceSim, t_us: int) -> None:
        for comp, bname, cost in dev.component_map():
            on = dev.rt.buffers[bname].energy >= cost
            self._avail_toggle(dev, comp, on, t_us)

    # -- manager driving --------------------------------------------------------

    def _run_manager(self, dev: DeviceSim, t_us: int) -> None:
        rt = dev.rt
        solicited = rt.solicited_seq is not None and not rt.sensed_pending

        def observe(kind, frm, to):
            if kind == "device_state":
                self.log.add(t_us, dev.name, "dev_state", state=to.value)
            else:
                self.log.add(t_us, dev.name, "task_state", kind=kind.value,
                             frm=frm.value, to=to.value)

        promoted = step_task_manager(rt, 0, 1 if solicited else 0, observer=observe)
        self._recheck_avail(dev, t_us)  # manager overhead came out of the MCU buffer
        if promoted == TaskKind.RECEIVE:
            # the radio is now listening; reception costs are paid per packet,
            # at beacon arrival
            self.log.add(t_us, dev.name, "radio_on")
        elif promoted is not None:
            if promoted == TaskKind.TRANSMIT:
                dev.inflight_reply_seq = rt.solicited_seq
            done_s, cost = execute_task(rt, promoted, t_us / 1e6, observer=observe)
            self.log.add(t_us, dev.name, "task_start", kind=promoted.value,
                         cost_j=cost, seq=rt.solicited_seq if rt.solicited_seq is not None else -1)
            self._recheck_avail(dev, t_us)
            self._push(int(round(done_s * 1e6)), EventKind.TASK_COMPLETE,
                       (dev.rt.app_id, dev.rt.module_id, promoted))
        dev.gen += 1
        self._schedule_wake(dev, t_us)

    def _schedule_wake(self, dev: DeviceSim, t_us: int) -> None:
        rt = dev.rt
        if rt.executing is not None:
            return
        waits: list[tuple[str, float]] = []
        states = rt.task_states
        solicited = rt.solicited_seq is not None and not rt.sensed_pending
        if solicited and states[TaskKind.SENSE] == TaskState.READY:
            waits.append((rt.buffer_for(TaskKind.SENSE),
                          rt.costs[TaskKind.SENSE].energy_j))
        elif rt.sensed_pending and states[TaskKind.TRANSMIT] == TaskState.READY:
            waits.append((rt.buffer_for(TaskKind.TRANSMIT),
                          rt.costs[TaskKind.TRANSMIT].energy_j))
        elif rt.control_pending:
            waits.append((rt.buffer_for(TaskKind.CONTROL),
                          rt.costs[TaskKind.CONTROL].energy_j))
        elif states[TaskKind.RECEIVE] == TaskState.READY:
            waits.append((rt.buffer_for(TaskKind.RECEIVE),
                          rt.costs[TaskKind.RECEIVE].energy_j))
        if rt.log_pending:
            waits.append((rt.buffer_for(TaskKind.LOG),
                          rt.energy_threshold + rt.costs[TaskKind.LOG].energy_j))
        for bname, cost in waits:
            slot = self._slots_until(dev, bname, cost * (1.0 + WAKE_MARGIN))
            # an already-met threshold means something other than energy is
            # blocking; the manager re-runs at the next real event instead
            if slot is not None and slot > dev.synced_slot:
                self._push(slot * dev.slot_us, EventKind.ENERGY_SLOT,
                           (rt.app_id, rt.module_id, dev.gen))
                return

    def _slots_until(self, dev: DeviceSim, bname: str, threshold: float) -> int | None:
        """Absolute slot index at which the buffer first reaches threshold."""
        buf = dev.rt.buffers[bname]
        if buf.energy >= threshold:
            return dev.synced_slot  # already there; wake immediately
        slot = dev.synced_slot
        limit = min(self.end_us, dev.trace_end_us) // dev.slot_us
        while slot < limit:
            p = dev.power_at_slot(slot)
            share = dev.rt.harvest_shares(p)[bname]
            k = min(limit, dev.segment_end_slot(slot)) - slot
            if k <= 0:
                break
            res = advance_buffer(buf, share, dev.slot_s, k, (threshold,))
            if res.rise_slots[0] is not None:
                return slot + res.rise_slots[0]
            buf = buf.with_energy(res.energy)
            slot += k
        return None

    # -- radio ------------------------------------------------------------------

    def deliver(self, dev: DeviceSim, t_us: int) -> tuple[bool, str]:
        """Beacon delivery rule at the arrival instant."""
        if dev.radio_off_at(t_us):
            return False, "scripted_off"
        if dev.rt.executing == TaskKind.RECEIVE:
            return False, "busy"
        if dev.rt.task_states[TaskKind.RECEIVE] != TaskState.RUNNING:
            return False, "radio_off"
        cost = dev.rt.costs[TaskKind.RECEIVE].energy_j
        if dev.rt.buffers[dev.rt.buffer_for(TaskKind.RECEIVE)].energy < cost:
            return False, "energy"
        return True, "ok"

    # -- event handlers ------------------------------------------------------------

    def _on_beacon_due(self, app_id: int) -> None:
        agg = self.sc.aggregator
        beacon = agg.beacon_due(app_id, self.now_us / 1e6)
        if beacon is not None:
            raw = encode_beacon(beacon)
            keepalive = beacon.app_synch.sync_new == beacon.app_synch.sync_current
            self.log.add(self.now_us, "agg", "beacon", app=app_id, seq=beacon.seq,
                         v=beacon.app_synch.sync_current, v_new=beacon.app_synch.sync_new,
                         bytes=len(raw), keepalive=1 if keepalive else 0,
                         tau_s=agg.tau(app_id), alpha=agg.apps[app_id].alpha)
            self._push(self.now_us + self.sc.propagation_delay_us,
                       EventKind.PACKET_ARRIVAL, ("beacon", app_id, beacon))
        next_due = self.now_us + int(round(agg.tau(app_id) * 1e6))
        self._push(next_due, EventKind.BEACON_DUE, (app_id,))

    def _on_beacon_arrival(self, app_id: int, beacon) -> None:
        spec = next(s for s in self.sc.apps if s.app_id == app_id)
        for m in range(1, spec.module_count + 1):
            dev = self.sc.devices[(app_id, m)]
            self._advance(dev, self.now_us)
            ok, reason = self.deliver(dev, self.now_us)
            if not ok:
                self.log.add(self.now_us, dev.name, "beacon_miss",
                             seq=beacon.seq, reason=reason)
                continue
            dev.pending_beacon = beacon
            done_s, cost = execute_task(dev.rt, TaskKind.RECEIVE, self.now_us / 1e6)
            self.log.add(self.now_us, dev.name, "task_start",
                         kind="receive", cost_j=cost, seq=beacon.seq)
            self._recheck_avail(dev, self.now_us)
            self._push(int(round(done_s * 1e6)), EventKind.TASK_COMPLETE,
                       (app_id, m, TaskKind.RECEIVE))

    def _on_task_complete(self, app_id: int, module_id: int, kind: TaskKind) -> None:
        dev = self.sc.devices[(app_id, module_id)]
        self._advance(dev, self.now_us)
        rt = dev.rt
        serving = rt.solicited_seq
        complete_task(rt, kind)
        self.log.add(self.now_us, dev.name, "task_done", kind=kind.value,
                     seq=serving if serving is not None else -1)
        if kind == TaskKind.RECEIVE:
            self._process_beacon(dev)
        elif kind == TaskKind.SENSE:
            dev.sensed_value_mw = dev.power_at_slot(dev.synced_slot)
            dev.sensed_at_ms = self.now_us // 1000
        elif kind == TaskKind.TRANSMIT:
            self._send_reading(dev)
        elif kind == TaskKind.CONTROL:
            self.log.add(self.now_us, dev.name, "actuate",
                         state=1 if rt.control_state else 0)
        self._run_manager(dev, self.now_us)

    def _process_beacon(self, dev: DeviceSim) -> None:
        beacon = dev.pending_beacon
        dev.pending_beacon = None
        if beacon is None:
            return
        rt = dev.rt
        self.log.add(self.now_us, dev.name, "beacon_rx", seq=beacon.seq)
        j = rt.module_id - 1
        synch = beacon.app_synch
        if j < len(synch.sync_new) and synch.sync_new[j] > synch.sync_current[j] \
                and beacon.seq != dev.last_answered_seq:
            rt.solicited_seq = beacon.seq
        act = beacon.actuator_control
        if act is not None and act.target_module == rt.module_id:
            rt.control_pending = True
            rt.control_state = act.state

    def _send_reading(self, dev: DeviceSim) -> None:
        rt = dev.rt
        seq = dev.inflight_reply_seq if dev.inflight_reply_seq is not None else 0
        dev.inflight_reply_seq = None
        dev.last_answered_seq = seq
        state = dev.true_state()
        pkt = SensorDataPacket(
            app_id=rt.app_id, module_id=rt.module_id, in_reply_to=seq,
            payload=SensorDataMsg(rt.app_id, rt.module_id, (SensorReading(
                sensor_id=0, value=scale_value(dev.sensed_value_mw),
                sample_time_ms=dev.sensed_at_ms),)),
            device_state_lp=state == DeviceState.LP,
            energy_nj=min(2**32 - 1, int(round(rt.total_energy * 1e9))),
        )
        raw = encode_sensor_packet(pkt)
        self.log.add(self.now_us, dev.name, "data_tx", seq=seq, bytes=len(raw))
        self._push(self.now_us + self.sc.propagation_delay_us,
                   EventKind.PACKET_ARRIVAL, ("sensor", raw))

    def _on_packet_arrival(self, payload: tuple) -> None:
        if payload[0] == "beacon":
            self._on_beacon_arrival(payload[1], payload[2])
            return
        pkt = decode_sensor_packet(payload[1])
        try:
            self.sc.aggregator.on_sensor_data(pkt, self.now_us / 1e6)
        except StaleReply:
            self.stale_replies += 1
            self.log.add(self.now_us, "agg", "stale", app=pkt.app_id,
                         seq=pkt.in_reply_to)

    def _on_energy_slot(self, app_id: int, module_id: int, gen: int) -> None:
        dev = self.sc.devices[(app_id, module_id)]
        if gen != dev.gen:
            return  # superseded by a later manager pass
        self._advance(dev, self.now_us)
        self._run_manager(dev, self.now_us)

    def _on_period_rollover(self, app_id: int) -> None:
        spec = next(s for s in self.sc.apps if s.app_id == app_id)
        self.sc.aggregator.on_period_rollover(app_id, self.now_us / 1e6)
        self._push(self.now_us + int(round(spec.period_s * 1e6)),
                   EventKind.PERIOD_ROLLOVER, (app_id,))

    # -- run ------------------------------------------------------------------------

    def run(self) -> EventLog:
        sc = self.sc
        self.log.add(0, "sim", "start", scenario=sc.name, seed=sc.seed,
                     duration_us=sc.duration_us)
        for dev in sc.devices.values():
            for comp, bname, cost in dev.component_map():
                on = dev.rt.buffers[bname].energy >= cost
                dev.avail[comp] = on
                dev.avail_since_us[comp] = 0
                dev.avail_total_us[comp] = 0
                dev.avail_first_us[comp] = 0 if on else None
                self.log.add(0, dev.name, "avail", comp=comp, on=1 if on else 0)
            self._push(0, EventKind.ENERGY_SLOT, (dev.rt.app_id, dev.rt.module_id, 0))
        for spec in sc.apps:
            self._push(0, EventKind.BEACON_DUE, (spec.app_id,))
            self._push(int(round(spec.period_s * 1e6)),
                       EventKind.PERIOD_ROLLOVER, (spec.app_id,))
        if sc.devices:
            trace_end = min(dev.trace_end_us for dev in sc.devices.values())
            if trace_end < self.end_us:
                self.end_us = trace_end
                self._push(trace_end, EventKind.TRACE_END, ())

        end_reason = "duration"
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            if t > self.end_us:
                break
            self.now_us = t
            if kind == EventKind.TRACE_END:
                end_reason = "trace_end"
                break
            if kind == EventKind.BEACON_DUE:
                self._on_beacon_due(*payload)
            elif kind == EventKind.PACKET_ARRIVAL:
                self._on_packet_arrival(payload)
            elif kind == EventKind.TASK_COMPLETE:
                self._on_task_complete(*payload)
            elif kind == EventKind.ENERGY_SLOT:
                self._on_energy_slot(*payload)
            elif kind == EventKind.PERIOD_ROLLOVER:
                self._on_period_rollover(*payload)

        self.now_us = self.end_us
        for dev in sc.devices.values():
            self._advance(dev, self.end_us)
            for comp in (COMP_MCU, COMP_RADIO):
                if dev.avail.get(comp, False):
                    dev.avail_total_us[comp] = dev.avail_total_us.get(comp, 0) \
                        + (self.end_us - dev.avail_since_us.get(comp, self.end_us))
                    dev.avail_since_us[comp] = self.end_us
            rt = dev.rt
            d_e = rt.total_energy - dev.initial_energy
            self.log.add(self.end_us, dev.name, "audit",
                         inflow=dev.inflow, leak=dev.leak, overflow=dev.overflow,
                         tasks=rt.task_energy, overhead=rt.overhead_energy,
                         d_e=d_e, e_end=rt.total_energy,
                         avail_mcu_us=dev.avail_total_us.get(COMP_MCU, 0),
                         avail_radio_us=dev.avail_total_us.get(COMP_RADIO, 0))
        self.log.add(self.end_us, "sim", "end", reason=end_reason,
                     stale=self.stale_replies)
        return self.log


def run(scenario: Scenario) -> EventLog:
    """Execute a built scenario; pure function of (scenario, seed)."""
    return Sim(scenario).run()
