"""Always-on data aggregator: beacon scheduling from the rate bound, sync
vector maintenance, solicitation reattempts, and a state-agnostic polling
baseline used as the comparison scheme.

One beacon solicits exactly one reading: the sync-vector scan raises a single
component of V-hat by one.  The beacon period tau is bounded so that the
periods-worth of beacons covers the total demanded readings, discounted by
the state-estimate accuracy alpha: tau <= alpha * T / sum(rates), floored at
the duration of one receive-sense-send chain.

The polling baseline round-robins over unmet modules at a fixed cadence
computed from nominal rates, ignoring state estimates and alpha, and never
reattempts; it exists so the state-aware scheme has a like-for-like rival on
identical seeds and packet formats.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .device import DEFAULT_TASK_COSTS, DeviceState, TaskCost, TaskKind
from .forecaster import ForecastModel, estimate_state, predict, update_alpha
from .protocol import (
    ActuatorControlMsg,
    AppSynchMsg,
    Beacon,
    ChannelId,
    RateControlMsg,
    SensorDataPacket,
    channel_for_app,
)


class AggregatorError(Exception):
    pass


class InfeasibleRate(AggregatorError):
    """Demanded rate cannot be met: the tau bound fell below the task floor."""

    def __init__(self, bound_s: float, floor_s: float):
        self.bound_s = bound_s
        self.floor_s = floor_s
        super().__init__(f"tau bound {bound_s:.6f}s below feasibility floor {floor_s:.6f}s")


class StaleReply(AggregatorError):
    """Sensor packet that matches no outstanding solicitation."""


class AggregatorScheme(Enum):
    VSDA = "vsda"
    POLLING = "polling"


@dataclass(frozen=True)
class AppSpec:
    """Application row: module population, per-state rates, period, channel."""

    app_id: int
    module_count: int
    rate_nml: float            # readings per module per period
    rate_lp: float
    period_s: float = 3600.0
    sensors_per_module: int = 1

    def __post_init__(self):
        if self.module_count < 1:
            raise ValueError("module_count must be >= 1")
        if self.rate_nml <= 0 or self.rate_lp <= 0:
            raise ValueError("rates must be positive")
        if self.rate_nml < self.rate_lp:
            raise ValueError("rate_nml must be >= rate_lp")
        if self.period_s <= 0:
            raise ValueError("period must be positive")
        if self.sensors_per_module < 1:
            raise ValueError("sensors_per_module must be >= 1")
        channel_for_app(self.app_id)  # validates the id range

    @property
    def channel(self) -> ChannelId:
        return channel_for_app(self.app_id)

    def rate_for(self, state: DeviceState) -> float:
        return self.rate_nml if state == DeviceState.NML else self.rate_lp

    def module_target(self, state: DeviceState) -> int:
        """Readings demanded from one module per period under ``state``."""
        return int(round(self.sensors_per_module * self.rate_for(state)))


def min_feasible_period(costs: dict[TaskKind, TaskCost] | None = None) -> float:
    """Duration of one full receive-sense-send chain, the tau floor."""
    costs = costs or DEFAULT_TASK_COSTS
    return (costs[TaskKind.RECEIVE].duration_s + costs[TaskKind.SENSE].duration_s
            + costs[TaskKind.TRANSMIT].duration_s)


def compute_beacon_period(alpha: float, period_s: float, spec: AppSpec,
                          states: list[DeviceState],
                          costs: dict[TaskKind, TaskCost] | None = None) -> float:
    """tau = alpha * T / total demanded readings, floored at the task chain.

    Raises InfeasibleRate when the bound is below the floor; callers proceed
    at the floor and surface the condition in metrics.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if len(states) != spec.module_count:
        raise ValueError("need one state per module")
    total = sum(spec.sensors_per_module * spec.rate_for(s) for s in states)
    tau = alpha * period_s / total
    floor_s = min_feasible_period(costs)
    if tau < floor_s:
        raise InfeasibleRate(tau, floor_s)
    return tau


def set_sync_vector(current, targets, order=None) -> tuple[int, ...]:
    """Single-flag scan: the first unmet module (in ``order``) is solicited.

    Returns V-hat; equal to ``current`` when every target is met.
    """
    current = tuple(current)
    if len(current) != len(targets):
        raise ValueError("vector and targets must have equal length")
    new = list(current)
    for j in order if order is not None else range(len(current)):
        if current[j] < targets[j]:
            new[j] = current[j] + 1
            break
    return tuple(new)


def solicited_module(current, new) -> int | None:
    """Index raised by the scan, or None for a keep-alive vector."""
    for j, (c, n) in enumerate(zip(current, new)):
        if n > c:
            return j
    return None


# ---------------------------------------------------------------------------
# Aggregator runtime
# ---------------------------------------------------------------------------

@dataclass
class AggregatorConfig:
    scheme: AggregatorScheme = AggregatorScheme.VSDA
    reattempt_limit: int = 3
    keepalive: bool = True
    skip_lp: bool = True            # prefer NML-estimated modules in the scan
    alpha_horizon: int = 100
    alpha_hysteresis: float = 0.01  # re-derive tau when alpha moves this much
    oracle: bool = False            # perfect state estimates (test harness)


@dataclass
class Outstanding:
    seq: int
    module_idx: int
    first_emit_s: float
    attempts: int = 0
    beacon: Beacon | None = None


@dataclass
class AppState:
    spec: AppSpec
    sync_current: list[int]
    sync_new: list[int]
    states_known: list[DeviceState]      # D, from piggy-backed reports
    states_estimated: list[DeviceState]  # D-hat, from the forecaster
    last_energy_j: list[float]
    pending_prediction: list[DeviceState | None]
    alpha: float = 1.0
    alpha_used: float = 1.0
    tau_s: float = 0.0
    infeasible: bool = False
    seq_next: int = 0
    outstanding: Outstanding | None = None
    scan_start: int = 0
    poll_ptr: int = 0
    target_high_water: list[int] = field(default_factory=list)
    pending_actuator: ActuatorControlMsg | None = None
    estimate_log: deque = field(default_factory=lambda: deque(maxlen=1000))
    # accounting
    solicitations: int = 0
    reattempts: int = 0
    losses: int = 0
    stale: int = 0
    delays_s: list[float] = field(default_factory=list)
    achieved_periods: list[tuple[int, ...]] = field(default_factory=list)
    target_periods: list[tuple[int, ...]] = field(default_factory=list)


class Aggregator:
    """Per-application beacon scheduling and sync-vector bookkeeping.

    The simulation engine owns time and the radio; it injects three hooks:
    ``history_fn(app, module, now, window)`` for the forecaster input,
    ``true_state_fn(app, module, now)`` for the oracle harness and accuracy
    accounting, and ``estimate_params_fn(app, module, last_energy, tau)`` for
    rolling predictions through the device's energy model.
    """

    def __init__(self, specs: list[AppSpec], config: AggregatorConfig,
                 models: dict[int, ForecastModel] | None = None,
                 history_fn=None, true_state_fn=None, estimate_params_fn=None,
                 observer=None):
        self.config = config
        self.models = models or {}
        self.history_fn = history_fn
        self.true_state_fn = true_state_fn
        self.estimate_params_fn = estimate_params_fn
        self.observer = observer or (lambda event, app_id, detail: None)
        self.apps: dict[int, AppState] = {}
        for spec in specs:
            st = AppState(
                spec=spec,
                sync_current=[0] * spec.module_count,
                sync_new=[0] * spec.module_count,
                states_known=[DeviceState.NML] * spec.module_count,
                states_estimated=[DeviceState.NML] * spec.module_count,
                last_energy_j=[0.0] * spec.module_count,
                pending_prediction=[None] * spec.module_count,
                estimate_log=deque(maxlen=max(1000, config.alpha_horizon)),
            )
            st.tau_s = self._tau(st)
            self.apps[spec.app_id] = st

    # -- beacon period --------------------------------------------------------

    def _tau(self, st: AppState) -> float:
        spec = st.spec
        if self.config.scheme == AggregatorScheme.POLLING:
            # state-agnostic cadence from nominal rates
            total = spec.module_count * spec.sensors_per_module * spec.rate_nml
            return max(spec.period_s / total, min_feasible_period())
        try:
            tau = compute_beacon_period(max(st.alpha_used, 1e-3), spec.period_s,
                                        spec, st.states_estimated)
            st.infeasible = False
        except InfeasibleRate as exc:
            st.infeasible = True
            self.observer("infeasible_rate", spec.app_id,
                          {"bound_s": exc.bound_s, "floor_s": exc.floor_s})
            tau = exc.floor_s
        return tau

    def tau(self, app_id: int) -> float:
        return self.apps[app_id].tau_s

    # -- device-state estimation ----------------------------------------------

    def _refresh_estimates(self, st: AppState, now: float) -> None:
        spec = st.spec
        for j in range(spec.module_count):
            actual = None
            if self.true_state_fn is not None:
                actual = self.true_state_fn(spec.app_id, j + 1, now)
            pending = st.pending_prediction[j]
            if pending is not None and actual is not None:
                st.estimate_log.append((pending, actual))

            if self.config.oracle:
                target_time = now + st.tau_s
                predicted = (self.true_state_fn(spec.app_id, j + 1, target_time)
                             if self.true_state_fn else DeviceState.NML)
            else:
                predicted = self._model_estimate(st, j, now)
            st.states_estimated[j] = predicted
            st.pending_prediction[j] = predicted

        if st.estimate_log:
            st.alpha = update_alpha(st.estimate_log, self.config.alpha_horizon)
        if abs(st.alpha - st.alpha_used) > self.config.alpha_hysteresis \
                or st.tau_s == 0.0:
            st.alpha_used = st.alpha
        st.tau_s = self._tau(st)

    def _model_estimate(self, st: AppState, j: int, now: float) -> DeviceState:
        spec = st.spec
        key = self._model_key(spec.app_id, j + 1)
        model = self.models.get(key)
        if model is None or self.history_fn is None or self.estimate_params_fn is None:
            return st.states_known[j]
        history = self.history_fn(spec.app_id, j + 1, now, model.window)
        if history is None or len(history) < model.window:
            return st.states_known[j]
        power = predict(model, history)
        params = self.estimate_params_fn(spec.app_id, j + 1, st.last_energy_j[j],
                                         max(st.tau_s, 1e-3))
        return estimate_state(power, params)

    @staticmethod
    def _model_key(app_id: int, module_id: int) -> int:
        return app_id * 1000 + module_id

    # -- beacon emission --------------------------------------------------------

    def beacon_due(self, app_id: int, now: float) -> Beacon | None:
        """Build the beacon for this tick: reattempt, new solicitation, or
        keep-alive.  Returns None when nothing should be broadcast."""
        st = self.apps[app_id]
        if self.config.scheme == AggregatorScheme.POLLING:
            return self._polling_beacon(st, now)

        if st.outstanding is not None:
            out = st.outstanding
            if out.attempts < self.config.reattempt_limit:
                out.attempts += 1
                st.reattempts += 1
                self.observer("reattempt", app_id,
                              {"seq": out.seq, "attempt": out.attempts})
                return out.beacon
            self._mark_lost(st, "reattempts_exhausted")

        self._refresh_estimates(st, now)
        targets = self._targets(st)
        order = self._scan_order(st)
        new_vec = set_sync_vector(st.sync_current, targets, order)
        j = solicited_module(st.sync_current, new_vec)
        if j is None and not self.config.keepalive:
            return None
        st.sync_new = list(new_vec)
        beacon = self._build_beacon(st, targets)
        if j is not None:
            st.solicitations += 1
            st.outstanding = Outstanding(seq=beacon.seq, module_idx=j,
                                         first_emit_s=now, beacon=beacon)
            self.observer("solicit", app_id,
                          {"seq": beacon.seq, "module": j + 1,
                           "v": tuple(st.sync_current), "v_new": new_vec})
        st.seq_next += 1
        return beacon

    def _polling_beacon(self, st: AppState, now: float) -> Beacon | None:
        if st.outstanding is not None:
            self._mark_lost(st, "superseded")  # poller never waits
        targets = self._targets_nominal(st)
        m = st.spec.module_count
        pick = None
        for step in range(m):
            j = (st.poll_ptr + step) % m
            if st.sync_current[j] < targets[j]:
                pick = j
                break
        if pick is None:
            if not self.config.keepalive:
                return None
            st.sync_new = list(st.sync_current)
            beacon = self._build_beacon(st, targets)
            st.seq_next += 1
            return beacon
        st.poll_ptr = (pick + 1) % m
        new_vec = list(st.sync_current)
        new_vec[pick] += 1
        st.sync_new = new_vec
        beacon = self._build_beacon(st, targets)
        st.solicitations += 1
        st.outstanding = Outstanding(seq=beacon.seq, module_idx=pick,
                                     first_emit_s=now, beacon=beacon)
        self.observer("solicit", st.spec.app_id,
                      {"seq": beacon.seq, "module": pick + 1,
                       "v": tuple(st.sync_current), "v_new": tuple(new_vec)})
        st.seq_next += 1
        return beacon

    def _targets(self, st: AppState) -> list[int]:
        targets = [st.spec.module_target(s) for s in st.states_estimated]
        if not st.target_high_water:
            st.target_high_water = list(targets)
        else:
            st.target_high_water = [max(h, t) for h, t
                                    in zip(st.target_high_water, targets)]
        return targets

    def _targets_nominal(self, st: AppState) -> list[int]:
        return [st.spec.module_target(DeviceState.NML)] * st.spec.module_count

    def _scan_order(self, st: AppState) -> list[int]:
        m = st.spec.module_count
        cyclic = [(st.scan_start + k) % m for k in range(m)]
        if not self.config.skip_lp:
            return cyclic
        nml = [j for j in cyclic if st.states_estimated[j] == DeviceState.NML]
        lp = [j for j in cyclic if st.states_estimated[j] == DeviceState.LP]
        return nml + lp

    def queue_actuator(self, app_id: int, target_module: int, state: bool) -> None:
        """Queue an actuator command; the next beacon carries it."""
        st = self.apps[app_id]
        if not 1 <= target_module <= st.spec.module_count:
            raise ValueError(f"module {target_module} outside app {app_id}")
        st.pending_actuator = ActuatorControlMsg(state, target_module)

    def _build_beacon(self, st: AppState, targets) -> Beacon:
        rates = tuple(int(round(st.spec.rate_for(s))) for s in st.states_estimated)
        actuator, st.pending_actuator = st.pending_actuator, None
        return Beacon(
            app_id=st.spec.app_id,
            seq=st.seq_next,
            rate_control=RateControlMsg(rates, rates),
            app_synch=AppSynchMsg(tuple(st.sync_current), tuple(st.sync_new)),
            actuator_control=actuator,
        )

    def _mark_lost(self, st: AppState, reason: str) -> None:
        out = st.outstanding
        st.losses += 1
        st.outstanding = None
        st.scan_start = (out.module_idx + 1) % st.spec.module_count
        self.observer("solicit_lost", st.spec.app_id,
                      {"seq": out.seq, "module": out.module_idx + 1, "reason": reason})

    # -- uplink -----------------------------------------------------------------

    def on_sensor_data(self, pkt: SensorDataPacket, now: float) -> float:
        """Account a sensor packet; returns the solicitation-to-receipt delay.

        Raises StaleReply for packets that match no outstanding solicitation;
        the counter still advances so the condition is visible in metrics.
        """
        st = self.apps.get(pkt.app_id)
        if st is None:
            raise StaleReply(f"unknown app {pkt.app_id}")
        out = st.outstanding
        if out is None or pkt.in_reply_to != out.seq \
                or pkt.module_id != out.module_idx + 1:
            st.stale += 1
            raise StaleReply(f"no outstanding solicitation for seq {pkt.in_reply_to}")
        j = out.module_idx
        st.sync_current[j] = st.sync_new[j]
        st.states_known[j] = DeviceState.LP if pkt.device_state_lp else DeviceState.NML
        st.last_energy_j[j] = pkt.energy_nj / 1e9
        st.outstanding = None
        delay = now - out.first_emit_s
        st.delays_s.append(delay)
        self.observer("solicit_ok", pkt.app_id,
                      {"seq": out.seq, "module": pkt.module_id, "delay_s": delay,
                       "v": tuple(st.sync_current)})
        return delay

    # -- period bookkeeping -------------------------------------------------------

    def on_period_rollover(self, app_id: int, now: float) -> None:
        st = self.apps[app_id]
        if st.outstanding is not None:
            self._mark_lost(st, "period_end")
        if self.config.scheme == AggregatorScheme.POLLING:
            targets = self._targets_nominal(st)
        elif st.target_high_water:
            # demand ceiling seen during the period; collection never exceeds it
            targets = list(st.target_high_water)
        else:
            targets = self._targets(st)
        st.achieved_periods.append(tuple(st.sync_current))
        st.target_periods.append(tuple(targets))
        self.observer("period", app_id,
                      {"achieved": tuple(st.sync_current), "targets": tuple(targets)})
        st.sync_current = [0] * st.spec.module_count
        st.sync_new = [0] * st.spec.module_count
        st.target_high_water = []
        st.scan_start = 0
