"""Battery-less device runtime: device/task state machines, task execution
with per-task energy costs, and the federated energy-management strategies.

The manager applies its rules in a fixed order each invocation: select the
device state, assign sensing rates for that state, then walk the task-state
guards (sense solicitation, transmit dependency, receive gating, energy
promotions).  Exactly one task may hold the Running state at a time; the
manager therefore promotes at most one task per invocation and is re-invoked
at every completion, which serialises the receive-sense-transmit chain.

Baselines: ``FH`` federates the same two buffers but splits harvest 50/50
regardless of task state; ``CENTRAL`` pools everything into one capacitor of
summed capacitance that backs every task.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .energy import EnergyBuffer, FederatedStore, buffer_step, split_harvest


class DeviceError(Exception):
    pass


class IllegalTransition(DeviceError):
    """Requested task-state change is not an edge of the transition diagram."""


class InsufficientEnergy(DeviceError):
    """Backing buffer cannot pay the task cost; the task reverts to Ready."""


class DeviceState(Enum):
    LP = "LP"
    NML = "NML"


class TaskKind(Enum):
    RECEIVE = "receive"
    SENSE = "sense"
    TRANSMIT = "transmit"
    CONTROL = "control"
    LOG = "log"


class TaskState(Enum):
    READY = "ready"
    RUNNING = "running"
    BLOCKED = "blocked"
    SUSPENDED = "suspended"


class EnergyStrategy(Enum):
    ATEM = "atem"
    FH = "fh"
    CENTRAL = "central"


# Edges of the task-state diagram.  Suspended doubles as the completed/idle
# state; re-activation goes through Ready.
LEGAL_TRANSITIONS: frozenset[tuple[TaskState, TaskState]] = frozenset({
    (TaskState.BLOCKED, TaskState.READY),
    (TaskState.READY, TaskState.BLOCKED),
    (TaskState.READY, TaskState.RUNNING),
    (TaskState.RUNNING, TaskState.READY),
    (TaskState.RUNNING, TaskState.SUSPENDED),
    (TaskState.SUSPENDED, TaskState.READY),
    (TaskState.SUSPENDED, TaskState.BLOCKED),
})


@dataclass(frozen=True)
class TaskCost:
    duration_ms: float
    energy_uj: float

    def __post_init__(self):
        if self.duration_ms <= 0 or self.energy_uj <= 0:
            raise ValueError("task costs must be positive")

    @property
    def duration_s(self) -> float:
        return self.duration_ms / 1e3

    @property
    def energy_j(self) -> float:
        return self.energy_uj / 1e6


# Worst-case task figures for the MSP430-class MCU with a BLE transceiver.
# Control defaults to the sense cost; the log cost is an assumption and is
# configurable like everything else.
DEFAULT_TASK_COSTS: dict[TaskKind, TaskCost] = {
    TaskKind.SENSE: TaskCost(12.030, 19.066),
    TaskKind.TRANSMIT: TaskCost(52.558, 67.891),
    TaskKind.RECEIVE: TaskCost(58.483, 92.931),
    TaskKind.CONTROL: TaskCost(12.030, 19.066),
    TaskKind.LOG: TaskCost(5.0, 5.0),
}


@dataclass(frozen=True)
class AtemOverhead:
    """Per-invocation cost of the on-device manager itself (measured values)."""

    task_manager_us: float = 0.379
    task_manager_nj: float = 0.493
    energy_manager_us: float = 0.198
    energy_manager_nj: float = 0.217
    overall_us: float = 0.582
    overall_nj: float = 0.782

    @property
    def overall_j(self) -> float:
        return self.overall_nj / 1e9


DEFAULT_OVERHEAD = AtemOverhead()

# E_th default: twice the cost of one full receive-sense-send cycle.
DEFAULT_ENERGY_THRESHOLD_J = 2 * (92.931e-6 + 19.066e-6 + 67.891e-6)

# Buffers sized so one sense fits the small capacitor and one receive+send
# fits the large one near 3 V.
DEFAULT_SENSE_CAPACITANCE = 47e-6
DEFAULT_RADIO_CAPACITANCE = 220e-6

SENSE_BUFFER = "sense"
RADIO_BUFFER = "radio"
CENTRAL_BUFFER = "central"

# Which buffer pays for which task under the federated strategies.
TASK_BUFFER = {
    TaskKind.SENSE: SENSE_BUFFER,
    TaskKind.CONTROL: SENSE_BUFFER,
    TaskKind.LOG: SENSE_BUFFER,
    TaskKind.TRANSMIT: RADIO_BUFFER,
    TaskKind.RECEIVE: RADIO_BUFFER,
}


def select_device_state(energy_j: float, threshold_j: float) -> DeviceState:
    """LP at or below the threshold, NML above it."""
    if energy_j < 0:
        raise ValueError("energy must be non-negative")
    return DeviceState.LP if energy_j <= threshold_j else DeviceState.NML


def assign_rates(spec, state: DeviceState) -> tuple[float, ...]:
    """Per-sensor acquisition rates for the module under ``state``.

    ``spec`` needs ``rate_nml``, ``rate_lp`` and ``sensors_per_module``
    (the aggregator's AppSpec satisfies this).
    """
    rate = spec.rate_nml if state == DeviceState.NML else spec.rate_lp
    return (float(rate),) * spec.sensors_per_module


@dataclass
class DeviceRuntime:
    """Mutable per-module state, driven only by the simulation event loop."""

    app_id: int
    module_id: int
    strategy: EnergyStrategy = EnergyStrategy.ATEM
    split_high: float = 0.7
    split_low: float = 0.3
    energy_threshold: float = DEFAULT_ENERGY_THRESHOLD_J
    costs: dict[TaskKind, TaskCost] = field(default_factory=lambda: dict(DEFAULT_TASK_COSTS))
    overhead: AtemOverhead = DEFAULT_OVERHEAD
    rate_nml: float = 10.0
    rate_lp: float = 5.0
    sensors_per_module: int = 1
    force_state: DeviceState | None = None
    buffers: dict[str, EnergyBuffer] = field(default_factory=dict)

    device_state: DeviceState = DeviceState.LP
    task_states: dict[TaskKind, TaskState] = field(default_factory=dict)
    rates: tuple[float, ...] = ()

    # protocol latches
    solicited_seq: int | None = None     # beacon seq this device must answer
    sensed_pending: bool = False         # sense done, data not yet transmitted
    control_pending: bool = False
    control_state: bool = False
    log_pending: bool = False
    executing: TaskKind | None = None    # task with an in-flight completion

    # accounting (joules)
    task_energy: float = 0.0
    overhead_energy: float = 0.0

    def __post_init__(self):
        if not self.buffers:
            self.buffers = default_buffers(self.strategy)
        if not self.task_states:
            # Cold start: the chain is idle, so the radio may become ready.
            self.task_states = {
                TaskKind.RECEIVE: TaskState.READY,
                TaskKind.SENSE: TaskState.SUSPENDED,
                TaskKind.TRANSMIT: TaskState.SUSPENDED,
                TaskKind.CONTROL: TaskState.SUSPENDED,
                TaskKind.LOG: TaskState.SUSPENDED,
            }
        self.rates = assign_rates(self, self.device_state)

    # -- buffer routing -----------------------------------------------------

    def buffer_for(self, kind: TaskKind) -> str:
        if self.strategy == EnergyStrategy.CENTRAL:
            return CENTRAL_BUFFER
        return TASK_BUFFER[kind]

    @property
    def total_energy(self) -> float:
        return sum(b.energy for b in self.buffers.values())

    def energy_of(self, kind: TaskKind) -> float:
        return self.buffers[self.buffer_for(kind)].energy

    @property
    def sense_active(self) -> bool:
        return self.task_states[TaskKind.SENSE] in (TaskState.READY, TaskState.RUNNING)

    def harvest_shares(self, harvest_power_mw: float) -> dict[str, float]:
        """Allocate harvested power across buffers per the strategy."""
        if self.strategy == EnergyStrategy.CENTRAL:
            return {CENTRAL_BUFFER: harvest_power_mw}
        if self.strategy == EnergyStrategy.FH:
            half = 0.5 * harvest_power_mw
            return {SENSE_BUFFER: half, RADIO_BUFFER: harvest_power_mw - half}
        store = FederatedStore(self.buffers[SENSE_BUFFER], self.buffers[RADIO_BUFFER],
                               self.split_high, self.split_low)
        s, r = split_harvest(store, harvest_power_mw, self.sense_active)
        return {SENSE_BUFFER: s, RADIO_BUFFER: r}

    # -- task-state machine ---------------------------------------------------

    def set_task_state(self, kind: TaskKind, new: TaskState, observer=None) -> None:
        cur = self.task_states[kind]
        if cur == new:
            return
        if (cur, new) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{kind.value}: {cur.value} -> {new.value}")
        if new == TaskState.RUNNING:
            running = [k for k, s in self.task_states.items()
                       if s == TaskState.RUNNING]
            if running:
                raise IllegalTransition(
                    f"{kind.value} cannot run while {running[0].value} is running")
        self.task_states[kind] = new
        if observer is not None:
            observer(kind, cur, new)

    def _move(self, kind: TaskKind, new: TaskState, observer) -> None:
        # route through Ready where the diagram has no direct edge
        cur = self.task_states[kind]
        if cur == new:
            return
        if (cur, new) not in LEGAL_TRANSITIONS:
            self.set_task_state(kind, TaskState.READY, observer)
        self.set_task_state(kind, new, observer)


def default_buffers(strategy: EnergyStrategy,
                    sense_capacitance: float = DEFAULT_SENSE_CAPACITANCE,
                    radio_capacitance: float = DEFAULT_RADIO_CAPACITANCE,
                    parallel_resistance: float = 10_000.0,
                    efficiency: float = 0.9,
                    leakage_fraction: float = 0.01) -> dict[str, EnergyBuffer]:
    make = lambda c: EnergyBuffer(capacitance=c, parallel_resistance=parallel_resistance,
                                  efficiency=efficiency, leakage_fraction=leakage_fraction)
    if strategy == EnergyStrategy.CENTRAL:
        return {CENTRAL_BUFFER: make(sense_capacitance + radio_capacitance)}
    return {SENSE_BUFFER: make(sense_capacitance), RADIO_BUFFER: make(radio_capacitance)}


def step_task_manager(rt: DeviceRuntime, sync_current: int, sync_new: int,
                      costs: dict[TaskKind, TaskCost] | None = None,
                      observer=None) -> TaskKind | None:
    """One manager invocation: device state, rates, then task-state guards.

    Returns the task promoted to Running this pass (at most one), or None.
    The per-invocation manager overhead is deducted from the MCU buffer.
    """
    costs = costs or rt.costs
    _deduct_overhead(rt)

    # 1) device state from total stored energy
    new_state = rt.force_state or select_device_state(rt.total_energy, rt.energy_threshold)
    if new_state != rt.device_state:
        rt.device_state = new_state
        if observer is not None:
            observer("device_state", None, new_state)

    # 2) per-sensor acquisition rate for the selected state
    rt.rates = assign_rates(rt, rt.device_state)

    # 3) task states, in the manager's fixed order
    solicited = sync_new > sync_current
    promoted: TaskKind | None = None
    states = rt.task_states

    if rt.executing != TaskKind.SENSE:
        if solicited:
            if rt.energy_of(TaskKind.SENSE) > costs[TaskKind.SENSE].energy_j \
                    and rt.executing is None:
                rt._move(TaskKind.SENSE, TaskState.RUNNING, observer)
                promoted = TaskKind.SENSE
            else:
                rt._move(TaskKind.SENSE, TaskState.READY, observer)
        elif not rt.sensed_pending:
            rt._move(TaskKind.SENSE, TaskState.BLOCKED, observer)

    if rt.executing != TaskKind.TRANSMIT:
        if states[TaskKind.SENSE] == TaskState.RUNNING or rt.sensed_pending:
            rt._move(TaskKind.TRANSMIT, TaskState.READY, observer)
        else:
            rt._move(TaskKind.TRANSMIT, TaskState.BLOCKED, observer)

    chain_idle = (states[TaskKind.SENSE] in (TaskState.SUSPENDED, TaskState.BLOCKED)
                  and states[TaskKind.TRANSMIT] in (TaskState.SUSPENDED, TaskState.BLOCKED)
                  and not rt.sensed_pending and not solicited)
    if rt.executing != TaskKind.RECEIVE and states[TaskKind.RECEIVE] != TaskState.RUNNING:
        if chain_idle and not rt.control_pending and not rt.log_pending:
            rt._move(TaskKind.RECEIVE, TaskState.READY, observer)
        else:
            rt._move(TaskKind.RECEIVE, TaskState.BLOCKED, observer)

    if promoted is None and rt.executing is None:
        if states[TaskKind.TRANSMIT] == TaskState.READY and rt.sensed_pending \
                and rt.energy_of(TaskKind.TRANSMIT) > costs[TaskKind.TRANSMIT].energy_j:
            rt._move(TaskKind.TRANSMIT, TaskState.RUNNING, observer)
            promoted = TaskKind.TRANSMIT
        elif states[TaskKind.RECEIVE] == TaskState.READY \
                and rt.energy_of(TaskKind.RECEIVE) > costs[TaskKind.RECEIVE].energy_j:
            rt._move(TaskKind.RECEIVE, TaskState.RUNNING, observer)
            promoted = TaskKind.RECEIVE

    # actuator control and opportunistic logging, outside the main chain
    if promoted is None and rt.executing is None and rt.control_pending \
            and not solicited and not rt.sensed_pending:
        if rt.energy_of(TaskKind.CONTROL) > costs[TaskKind.CONTROL].energy_j:
            rt._move(TaskKind.CONTROL, TaskState.RUNNING, observer)
            promoted = TaskKind.CONTROL
        else:
            rt._move(TaskKind.CONTROL, TaskState.READY, observer)
    if promoted is None and rt.executing is None and rt.log_pending \
            and not solicited and not rt.sensed_pending and not rt.control_pending:
        surplus = rt.energy_threshold + costs[TaskKind.LOG].energy_j
        if rt.energy_of(TaskKind.LOG) > surplus:
            rt._move(TaskKind.LOG, TaskState.RUNNING, observer)
            promoted = TaskKind.LOG

    return promoted


def _deduct_overhead(rt: DeviceRuntime) -> None:
    # the MCU itself runs the manager; clamp at zero so the accounting stays
    # physical when the device is completely dark
    name = rt.buffer_for(TaskKind.SENSE)
    buf = rt.buffers[name]
    take = min(buf.energy, rt.overhead.overall_j)
    rt.buffers[name] = buf.with_energy(buf.energy - take)
    rt.overhead_energy += take


def execute_task(rt: DeviceRuntime, kind: TaskKind, now_s: float,
                 observer=None) -> tuple[float, float]:
    """Start a Running task: pay its cost now, return (completion time, cost).

    Raises InsufficientEnergy (task reverts to Ready) when the backing buffer
    cannot cover the cost.
    """
    if rt.task_states[kind] != TaskState.RUNNING:
        raise DeviceError(f"{kind.value} is not running")
    cost = rt.costs[kind]
    name = rt.buffer_for(kind)
    buf = rt.buffers[name]
    if buf.energy < cost.energy_j:
        rt.set_task_state(kind, TaskState.READY, observer)
        raise InsufficientEnergy(
            f"{kind.value} needs {cost.energy_j:.3e} J, buffer holds {buf.energy:.3e} J")
    rt.buffers[name] = buf.with_energy(buf.energy - cost.energy_j)
    rt.task_energy += cost.energy_j
    rt.executing = kind
    return now_s + cost.duration_s, cost.energy_j


def complete_task(rt: DeviceRuntime, kind: TaskKind, observer=None) -> None:
    """Finish an executing task and latch its effect."""
    if rt.executing != kind:
        raise DeviceError(f"{kind.value} is not the executing task")
    rt.executing = None
    rt.set_task_state(kind, TaskState.SUSPENDED, observer)
    if kind == TaskKind.SENSE:
        rt.sensed_pending = True
        if rt.energy_of(TaskKind.LOG) > rt.energy_threshold + rt.costs[TaskKind.LOG].energy_j:
            rt.log_pending = True
    elif kind == TaskKind.TRANSMIT:
        rt.sensed_pending = False
        rt.solicited_seq = None
    elif kind == TaskKind.CONTROL:
        rt.control_pending = False
        if rt.energy_of(TaskKind.LOG) > rt.energy_threshold + rt.costs[TaskKind.LOG].energy_j:
            rt.log_pending = True
    elif kind == TaskKind.LOG:
        rt.log_pending = False


def apply_energy_strategy(rt: DeviceRuntime, harvest_power_mw: float,
                          slot_s: float) -> None:
    """One energy slot: allocate harvest per strategy and step each buffer."""
    if slot_s <= 0:
        raise ValueError("slot must be positive")
    for name, share_mw in rt.harvest_shares(harvest_power_mw).items():
        rt.buffers[name] = buffer_step(rt.buffers[name], share_mw, slot_s)
