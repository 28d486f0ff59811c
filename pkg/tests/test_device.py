"""Device-state selection, task-state machine, task execution, strategies."""

import pytest

from blis_sim.device import (
    CENTRAL_BUFFER,
    DEFAULT_ENERGY_THRESHOLD_J,
    RADIO_BUFFER,
    SENSE_BUFFER,
    DeviceRuntime,
    DeviceState,
    EnergyStrategy,
    IllegalTransition,
    InsufficientEnergy,
    TaskKind,
    TaskState,
    apply_energy_strategy,
    assign_rates,
    complete_task,
    default_buffers,
    execute_task,
    select_device_state,
    step_task_manager,
)
from blis_sim.energy import EnergyBuffer


class AppSpecStub:
    def __init__(self, rate_nml, rate_lp, sensors=1):
        self.rate_nml = rate_nml
        self.rate_lp = rate_lp
        self.sensors_per_module = sensors


def make_device(strategy=EnergyStrategy.ATEM, **kw) -> DeviceRuntime:
    rt = DeviceRuntime(app_id=1, module_id=1, strategy=strategy, **kw)
    return rt


def charge(rt: DeviceRuntime, name: str, energy_j: float) -> None:
    rt.buffers[name] = rt.buffers[name].with_energy(energy_j)


class TestDeviceState:
    def test_zero_energy_is_lp(self):
        assert select_device_state(0.0, 1e-6) == DeviceState.LP

    def test_threshold_boundary_inclusive(self):
        e = DEFAULT_ENERGY_THRESHOLD_J
        assert select_device_state(e, e) == DeviceState.LP

    def test_above_threshold_is_nml(self):
        e = DEFAULT_ENERGY_THRESHOLD_J
        assert select_device_state(2 * e, e) == DeviceState.NML

    def test_default_threshold_is_two_cycles(self):
        assert DEFAULT_ENERGY_THRESHOLD_J == pytest.approx(359.776e-6)


class TestAssignRates:
    def test_table_rows(self):
        app3 = AppSpecStub(rate_nml=20, rate_lp=10)
        app1 = AppSpecStub(rate_nml=10, rate_lp=5)
        assert assign_rates(app3, DeviceState.NML) == (20.0,)
        assert assign_rates(app3, DeviceState.LP) == (10.0,)
        assert assign_rates(app1, DeviceState.LP) == (5.0,)

    def test_every_sensor_gets_the_rate(self):
        spec = AppSpecStub(rate_nml=16, rate_lp=8, sensors=3)
        assert assign_rates(spec, DeviceState.NML) == (16.0, 16.0, 16.0)


class TestTaskManager:
    def test_solicited_with_energy_runs_sense(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        promoted = step_task_manager(rt, sync_current=0, sync_new=1)
        assert promoted == TaskKind.SENSE
        assert rt.task_states[TaskKind.SENSE] == TaskState.RUNNING

    def test_unsolicited_sense_blocked(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        step_task_manager(rt, sync_current=1, sync_new=1)
        assert rt.task_states[TaskKind.SENSE] == TaskState.BLOCKED

    def test_solicited_without_energy_sense_ready(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 5e-6)
        promoted = step_task_manager(rt, sync_current=0, sync_new=1)
        assert promoted is None
        assert rt.task_states[TaskKind.SENSE] == TaskState.READY

    def test_transmit_ready_while_sense_runs(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        charge(rt, RADIO_BUFFER, 200e-6)
        step_task_manager(rt, 0, 1)
        assert rt.task_states[TaskKind.TRANSMIT] == TaskState.READY
        assert rt.task_states[TaskKind.RECEIVE] == TaskState.BLOCKED

    def test_receive_ready_then_running_when_chain_idle(self):
        rt = make_device()
        charge(rt, RADIO_BUFFER, 100e-6)
        promoted = step_task_manager(rt, 0, 0)
        assert promoted == TaskKind.RECEIVE
        assert rt.task_states[TaskKind.RECEIVE] == TaskState.RUNNING

    def test_receive_waits_for_energy(self):
        rt = make_device()
        charge(rt, RADIO_BUFFER, 50e-6)  # below the 92.931 uJ receive cost
        promoted = step_task_manager(rt, 0, 0)
        assert promoted is None
        assert rt.task_states[TaskKind.RECEIVE] == TaskState.READY

    def test_transmit_promoted_after_sense_completes(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        charge(rt, RADIO_BUFFER, 200e-6)
        step_task_manager(rt, 0, 1)
        execute_task(rt, TaskKind.SENSE, 0.0)
        complete_task(rt, TaskKind.SENSE)
        assert rt.sensed_pending
        promoted = step_task_manager(rt, 0, 1)
        assert promoted == TaskKind.TRANSMIT

    def test_only_one_task_runs_at_a_time(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        charge(rt, RADIO_BUFFER, 200e-6)
        step_task_manager(rt, 0, 1)  # sense running
        with pytest.raises(IllegalTransition):
            rt.set_task_state(TaskKind.RECEIVE, TaskState.READY)
            rt.set_task_state(TaskKind.RECEIVE, TaskState.RUNNING)

    def test_rates_follow_state_within_one_step(self):
        rt = make_device(rate_nml=20, rate_lp=10)
        charge(rt, RADIO_BUFFER, 2 * DEFAULT_ENERGY_THRESHOLD_J)
        step_task_manager(rt, 0, 0)
        assert rt.device_state == DeviceState.NML
        assert rt.rates == (20.0,)
        charge(rt, RADIO_BUFFER, 0.0)
        step_task_manager(rt, 0, 0)
        assert rt.device_state == DeviceState.LP
        assert rt.rates == (10.0,)

    def test_overhead_deducted_each_invocation(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        before = rt.buffers[SENSE_BUFFER].energy
        step_task_manager(rt, 1, 1)
        assert rt.overhead_energy == pytest.approx(0.782e-9)
        assert rt.buffers[SENSE_BUFFER].energy == pytest.approx(before - 0.782e-9)


class TestExecuteTask:
    def _running(self, rt, kind):
        rt.set_task_state(kind, TaskState.READY)
        rt.set_task_state(kind, TaskState.RUNNING)

    def test_sense_boundary_exact_cost(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 19.066e-6)
        self._running(rt, TaskKind.SENSE)
        done, drawn = execute_task(rt, TaskKind.SENSE, 0.0)
        assert done == pytest.approx(0.012030)
        assert drawn == pytest.approx(19.066e-6)
        assert rt.buffers[SENSE_BUFFER].energy == 0.0

    def test_transmit_just_below_cost(self):
        rt = make_device()
        charge(rt, RADIO_BUFFER, 67.890e-6)
        self._running(rt, TaskKind.TRANSMIT)
        with pytest.raises(InsufficientEnergy):
            execute_task(rt, TaskKind.TRANSMIT, 0.0)
        assert rt.task_states[TaskKind.TRANSMIT] == TaskState.READY

    def test_receive_duration(self):
        rt = make_device()
        charge(rt, RADIO_BUFFER, 100e-6)
        self._running(rt, TaskKind.RECEIVE)
        done, _ = execute_task(rt, TaskKind.RECEIVE, 2.0)
        assert done == pytest.approx(2.058483)

    def test_completion_latches_effects(self):
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        self._running(rt, TaskKind.SENSE)
        execute_task(rt, TaskKind.SENSE, 0.0)
        complete_task(rt, TaskKind.SENSE)
        assert rt.task_states[TaskKind.SENSE] == TaskState.SUSPENDED
        assert rt.sensed_pending
        charge(rt, RADIO_BUFFER, 100e-6)
        self._running(rt, TaskKind.TRANSMIT)
        execute_task(rt, TaskKind.TRANSMIT, 0.0)
        complete_task(rt, TaskKind.TRANSMIT)
        assert not rt.sensed_pending

    def test_central_pays_from_single_buffer(self):
        rt = make_device(strategy=EnergyStrategy.CENTRAL)
        charge(rt, CENTRAL_BUFFER, 200e-6)
        self._running(rt, TaskKind.SENSE)
        execute_task(rt, TaskKind.SENSE, 0.0)
        assert rt.buffers[CENTRAL_BUFFER].energy == pytest.approx(200e-6 - 19.066e-6)


class TestEnergyStrategies:
    def _ideal(self, strategy):
        # lossless buffers so routing arithmetic is exact
        buffers = {
            name: EnergyBuffer(capacitance=b.capacitance, parallel_resistance=1e9,
                               efficiency=1.0, leakage_fraction=0.0)
            for name, b in default_buffers(strategy).items()
        }
        return make_device(strategy=strategy, buffers=buffers)

    def test_atem_favours_sense_when_active(self):
        rt = self._ideal(EnergyStrategy.ATEM)
        rt.set_task_state(TaskKind.SENSE, TaskState.READY)
        apply_energy_strategy(rt, 0.1, 1.0)
        assert rt.buffers[SENSE_BUFFER].energy == pytest.approx(70e-6)
        assert rt.buffers[RADIO_BUFFER].energy == pytest.approx(30e-6)

    def test_atem_favours_radio_when_sense_idle(self):
        rt = self._ideal(EnergyStrategy.ATEM)
        rt.task_states[TaskKind.SENSE] = TaskState.SUSPENDED
        apply_energy_strategy(rt, 0.1, 1.0)
        assert rt.buffers[SENSE_BUFFER].energy == pytest.approx(30e-6)
        assert rt.buffers[RADIO_BUFFER].energy == pytest.approx(70e-6)

    def test_fh_is_task_unaware(self):
        rt = self._ideal(EnergyStrategy.FH)
        rt.set_task_state(TaskKind.SENSE, TaskState.READY)
        apply_energy_strategy(rt, 0.1, 1.0)
        assert rt.buffers[SENSE_BUFFER].energy == pytest.approx(50e-6)
        assert rt.buffers[RADIO_BUFFER].energy == pytest.approx(50e-6)

    def test_central_pools_everything(self):
        rt = self._ideal(EnergyStrategy.CENTRAL)
        apply_energy_strategy(rt, 0.1, 1.0)
        assert rt.buffers[CENTRAL_BUFFER].energy == pytest.approx(100e-6)

    def test_central_capacitance_is_the_sum(self):
        bufs = default_buffers(EnergyStrategy.CENTRAL)
        assert bufs[CENTRAL_BUFFER].capacitance == pytest.approx(267e-6)


class TestTransitions:
    def test_illegal_direct_jump(self):
        rt = make_device()
        with pytest.raises(IllegalTransition):
            rt.set_task_state(TaskKind.SENSE, TaskState.RUNNING)  # suspended -> running

    def test_observer_sees_transitions(self):
        seen = []
        rt = make_device()
        charge(rt, SENSE_BUFFER, 25e-6)
        step_task_manager(rt, 0, 1, observer=lambda k, a, b: seen.append((k, a, b)))
        kinds = [k for k, _, _ in seen if k == TaskKind.SENSE]
        assert kinds  # sense moved through ready into running
