"""Capacitor charging curve, slotted buffer recurrence, and harvest split."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blis_sim.energy import (
    EnergyBuffer,
    FederatedStore,
    HarvesterTrace,
    NonFiniteInput,
    OutOfRange,
    TraceFormatError,
    advance_buffer,
    buffer_step,
    capacitor_voltage,
    constant_trace,
    load_trace_csv,
    slots_until,
    split_harvest,
    trace_power_at,
)

# Oracle for the RC curve: direct arithmetic evaluation of
# sqrt(P*r_p - exp(-2t/(c*r_p)) * (P*r_p - v0^2)) with P=1mW, r_p=10k,
# c=100uF, v0=0, t=1s.  P*r_p = 10 V^2, c*r_p = 1 s.
EQ1_T1S = math.sqrt(10.0 * (1.0 - math.exp(-2.0)))  # 2.9405181801229987
EQ1_STEADY = math.sqrt(10.0)

REF_BUFFER = EnergyBuffer(capacitance=100e-6, parallel_resistance=10_000.0,
                          efficiency=1.0, leakage_fraction=0.0)


def buf(c=100e-6, rp=10_000.0, v=0.0, eta=1.0, sigma=0.0) -> EnergyBuffer:
    return EnergyBuffer(capacitance=c, parallel_resistance=rp, voltage=v,
                        efficiency=eta, leakage_fraction=sigma)


class TestCapacitorVoltage:
    def test_t_zero_returns_v0(self):
        for v0 in (0.0, 1.3, 2.9):
            assert capacitor_voltage(1.0, REF_BUFFER, v0, 0.0) == pytest.approx(v0)

    def test_steady_state(self):
        v = capacitor_voltage(1.0, REF_BUFFER, 0.0, 1e6)
        assert v == pytest.approx(EQ1_STEADY, rel=1e-12)

    def test_one_second_matches_oracle(self):
        v = capacitor_voltage(1.0, REF_BUFFER, 0.0, 1.0)
        assert v == pytest.approx(EQ1_T1S, rel=1e-9)

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteInput):
            capacitor_voltage(float("nan"), REF_BUFFER, 0.0, 1.0)
        with pytest.raises(NonFiniteInput):
            capacitor_voltage(1.0, REF_BUFFER, float("inf"), 1.0)

    def test_negative_radicand(self):
        # v0 far above the steady state with a long decay can only approach
        # steady state from above; radicand stays positive.  Force a negative
        # radicand with P=0 and the exponential overshooting via huge v0 is
        # impossible analytically, so check the guard with a tiny tolerance
        # violation instead: P=0, v0=1 decays, never negative.
        v = capacitor_voltage(0.0, REF_BUFFER, 1.0, 5.0)
        assert 0.0 < v < 1.0

    @given(st.floats(0.1, 50.0), st.floats(0.0, 3.0),
           st.floats(0.01, 10.0), st.floats(0.01, 10.0))
    def test_monotone_approach_to_steady_state(self, p_mw, v0, t1, dt):
        # |v(t) - sqrt(P*r_p)| shrinks as t grows
        target = math.sqrt((p_mw / 1000.0) * REF_BUFFER.parallel_resistance)
        d1 = abs(capacitor_voltage(p_mw, REF_BUFFER, v0, t1) - target)
        d2 = abs(capacitor_voltage(p_mw, REF_BUFFER, v0, t1 + dt) - target)
        assert d2 <= d1 + 1e-12


class TestBufferStep:
    def test_no_harvest_no_leak(self):
        b = buf().with_energy(10e-6)
        assert buffer_step(b, 0.0, 0.5).energy == pytest.approx(10e-6)

    def test_worked_example(self):
        # (1-0.1)*10uJ + 0.8*1mW*10ms = 9uJ + 8uJ = 17uJ
        b = buf(eta=0.8, sigma=0.1).with_energy(10e-6)
        assert buffer_step(b, 1.0, 0.01).energy == pytest.approx(17e-6, rel=1e-12)

    def test_pure_integration(self):
        b = buf(rp=1e7)  # keep the steady-state cap out of the way
        assert buffer_step(b, 1.0, 1.0).energy == pytest.approx(1e-3, rel=1e-12)

    def test_conservation_many_slots(self):
        # sigma=0, eta=1: energy gained over N slots equals sum(P_i * t)
        b = buf(rp=1e9)  # huge r_p so the cap never binds
        total = 0.0
        powers = [1.0 + 0.5 * math.sin(i / 100.0) for i in range(2000)]
        for p in powers:
            b = buffer_step(b, p, 0.01)
            total += (p / 1000.0) * 0.01
        assert b.energy == pytest.approx(total, rel=1e-9)

    def test_overflow_discarded_at_cap(self):
        b = buf(c=1e-6, rp=100.0)  # cap at 1 mW: 0.5*1e-6*0.1 = 50 nJ
        cap = b.steady_state_cap(1.0)
        for _ in range(200):
            b = buffer_step(b, 1.0, 0.01)
        assert b.energy == pytest.approx(cap)
        # stored energy above a weaker slot's cap decays, never clamps
        b2 = buffer_step(b, 0.001, 0.01)
        assert b2.energy == pytest.approx(b.energy)  # sigma=0: flat

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteInput):
            buffer_step(buf(), float("nan"), 0.01)

    @given(st.floats(0.0, 20.0), st.floats(0.0, 500e-6), st.floats(0.0, 0.2),
           st.floats(0.5, 1.0), st.integers(1, 40))
    @settings(max_examples=200)
    def test_energy_never_negative(self, p_mw, e0, sigma, eta, n):
        b = buf(eta=eta, sigma=sigma).with_energy(e0)
        for _ in range(n):
            b = buffer_step(b, p_mw, 0.01)
            assert b.energy >= 0.0


class TestSplitHarvest:
    STORE = FederatedStore(buffer_sense=buf(c=47e-6), buffer_radio=buf(c=220e-6))

    def test_sense_active(self):
        assert split_harvest(self.STORE, 0.1, True) == pytest.approx((0.07, 0.03))

    def test_sense_idle(self):
        assert split_harvest(self.STORE, 0.1, False) == pytest.approx((0.03, 0.07))

    def test_zero_power(self):
        assert split_harvest(self.STORE, 0.0, True) == (0.0, 0.0)

    @given(st.floats(0.0, 100.0), st.booleans())
    def test_conserves_power(self, p, active):
        s, r = split_harvest(self.STORE, p, active)
        assert s + r == pytest.approx(p, rel=1e-12, abs=1e-15)
        assert s >= 0 and r >= 0

    def test_split_validation(self):
        with pytest.raises(ValueError):
            FederatedStore(buffer_sense=buf(), buffer_radio=buf(),
                           split_high=0.5, split_low=0.5)


class TestTrace:
    def test_zero_order_hold(self):
        tr = HarvesterTrace((0.0, 1.0), (5.0, 7.0), 1.0)
        assert trace_power_at(tr, 0.5) == 5.0
        assert trace_power_at(tr, 1.0) == 7.0
        assert trace_power_at(tr, 1.9) == 7.0  # final sample's hold

    def test_constant(self):
        tr = constant_trace(3.0, 10.0)
        for t in (0.0, 2.5, 9.9):
            assert trace_power_at(tr, t) == 3.0

    def test_out_of_range(self):
        tr = HarvesterTrace((0.0, 1.0), (5.0, 7.0), 1.0)
        with pytest.raises(OutOfRange):
            trace_power_at(tr, 2.5)
        with pytest.raises(OutOfRange):
            trace_power_at(tr, -0.1)

    def test_invariants_rejected(self):
        with pytest.raises(ValueError):
            HarvesterTrace((0.0, 1.0), (5.0, -1.0), 1.0)
        with pytest.raises(ValueError):
            HarvesterTrace((0.0, 0.5), (5.0, 7.0), 1.0)  # non-uniform

    def test_csv_round_trip(self, tmp_path):
        p = tmp_path / "trace.csv"
        p.write_text("time_s,power_mw\n0.0,5.0\n1.0,7.0\n2.0,6.5\n")
        tr = load_trace_csv(str(p))
        assert tr.powers == (5.0, 7.0, 6.5)
        assert tr.sample_interval == 1.0

    @pytest.mark.parametrize("body,lineno", [
        ("time_s,power\n0,1\n", 1),
        ("time_s,power_mw\n0,abc\n1,2\n", 2),
        ("time_s,power_mw\n0,1\n0,2\n", 3),
        ("time_s,power_mw\n0,1\n1,-2\n", 3),
    ])
    def test_csv_errors_carry_line_numbers(self, tmp_path, body, lineno):
        p = tmp_path / "bad.csv"
        p.write_text(body)
        with pytest.raises(TraceFormatError, match=f"line {lineno}"):
            load_trace_csv(str(p))


class TestAdvanceBuffer:
    """Closed-form advance must match the iterated recurrence."""

    def _iterate(self, b: EnergyBuffer, p_mw: float, slot: float, n: int):
        inflow = leak = overflow = 0.0
        for _ in range(n):
            e = b.energy
            decayed = (1.0 - b.leakage_fraction) * e
            charged = decayed + b.efficiency * (p_mw / 1000.0) * slot
            cap = b.steady_state_cap(p_mw)
            stepped = min(charged, max(cap, decayed))
            inflow += charged - decayed
            leak += e - decayed
            overflow += charged - stepped
            b = b.with_energy(stepped)
        return b.energy, inflow, leak, overflow

    @given(
        p_mw=st.floats(0.0, 30.0),
        e0=st.floats(0.0, 2e-3),
        sigma=st.sampled_from([0.0, 0.001, 0.01, 0.1]),
        eta=st.floats(0.5, 1.0),
        c=st.sampled_from([4.7e-6, 47e-6, 220e-6]),
        n=st.integers(0, 300),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_iteration(self, p_mw, e0, sigma, eta, c, n):
        b = buf(c=c, rp=10_000.0, eta=eta, sigma=sigma).with_energy(e0)
        want_e, want_in, want_leak, want_over = self._iterate(b, p_mw, 0.01, n)
        got = advance_buffer(b, p_mw, 0.01, n)
        scale = max(1e-9, want_e, want_in)
        assert got.energy == pytest.approx(want_e, rel=1e-9, abs=1e-9 * scale)
        assert got.inflow == pytest.approx(want_in, rel=1e-9, abs=1e-12)
        assert got.leak == pytest.approx(want_leak, rel=1e-7, abs=1e-9 * scale)
        assert got.overflow == pytest.approx(want_over, rel=1e-7, abs=1e-9 * scale)

    @given(
        p_mw=st.floats(0.0, 30.0),
        e0=st.floats(0.0, 2e-3),
        sigma=st.sampled_from([0.0, 0.01, 0.1]),
        n=st.integers(0, 300),
        thr=st.floats(1e-6, 1e-3),
    )
    @settings(max_examples=300, deadline=None)
    def test_crossings_match_iteration(self, p_mw, e0, sigma, n, thr):
        b = buf(c=220e-6, rp=10_000.0, eta=0.9, sigma=sigma).with_energy(e0)
        # brute-force first rise / first fall across slot boundaries
        cur = b
        rise = fall = None
        state = cur.energy >= thr
        for k in range(1, n + 1):
            cur = buffer_step(cur, p_mw, 0.01)
            now_above = cur.energy >= thr
            if now_above and not state and rise is None:
                rise = k
            if not now_above and state and fall is None:
                fall = k
            state = now_above
        got = advance_buffer(b, p_mw, 0.01, n, thresholds=(thr,))
        assert got.rise_slots[0] == rise
        assert got.fall_slots[0] == fall

    def test_audit_identity(self):
        b = buf(c=47e-6, rp=10_000.0, eta=0.9, sigma=0.01).with_energy(30e-6)
        res = advance_buffer(b, 2.5, 0.01, 100_000)
        lhs = res.inflow - res.leak - res.overflow
        assert lhs == pytest.approx(res.energy - b.energy, abs=1e-12)

    def test_slots_until(self):
        b = buf(c=220e-6, rp=10_000.0, eta=0.9, sigma=0.0)
        # 0.9 * 5mW * 10ms = 45 uJ per slot; 92.931 uJ needs 3 slots
        assert slots_until(b, 5.0, 0.01, 92.931e-6, 1000) == 3
        assert slots_until(b.with_energy(1e-4), 5.0, 0.01, 92.931e-6, 1000) == 0
        assert slots_until(b, 0.0, 0.01, 92.931e-6, 1000) is None
