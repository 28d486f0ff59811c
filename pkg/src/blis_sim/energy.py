"""Harvester traces, capacitor buffers, and the slotted energy recurrence.

Two views of the same storage element are provided:

* ``capacitor_voltage`` is the continuous RC charging curve, exposed for
  validation and analysis.
* ``buffer_step`` is the per-slot recurrence that the simulator treats as
  energy ground truth: E(n+1) = (1-sigma)*E(n) + eta*P*t, capped at the
  steady-state energy for the slot's charging power.

``advance_buffer`` evaluates the same recurrence over many slots in closed
form (geometric sums per regime) so the event-driven simulator does not have
to iterate slot by slot.  Equivalence with the iterated recurrence is
property-tested.

Units: power in milliwatts at the API surface, energy in joules internally,
capacitance in farads, resistance in ohms, time in seconds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence


class EnergyModelError(Exception):
    pass


class NonFiniteInput(EnergyModelError):
    """An argument was NaN or infinite."""


class NegativeRadicand(EnergyModelError):
    """The RC voltage radicand went below -1e-12 (inconsistent inputs)."""


class OutOfRange(EnergyModelError):
    """Trace lookup outside the covered time span."""


class TraceFormatError(EnergyModelError):
    """Malformed trace CSV; message carries the offending line number."""


RADICAND_TOLERANCE = 1e-12


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteInput(f"non-finite value {v!r}")


# ---------------------------------------------------------------------------
# Harvester traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HarvesterTrace:
    """Uniformly sampled ambient power, held constant between samples."""

    times: tuple[float, ...]       # seconds, strictly increasing
    powers: tuple[float, ...]      # milliwatts, >= 0
    sample_interval: float         # seconds

    def __post_init__(self):
        if len(self.times) != len(self.powers) or not self.times:
            raise ValueError("trace needs equal, non-empty time/power columns")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")
        prev = None
        for i, (t, p) in enumerate(zip(self.times, self.powers)):
            _check_finite(t, p)
            if p < 0:
                raise ValueError(f"sample {i}: negative power {p}")
            if prev is not None:
                step = t - prev
                if step <= 0:
                    raise ValueError(f"sample {i}: timestamps not increasing")
                if abs(step - self.sample_interval) > 1e-9 * max(1.0, self.sample_interval):
                    raise ValueError(
                        f"sample {i}: spacing {step} != interval {self.sample_interval}"
                    )
            prev = t

    @property
    def start_time(self) -> float:
        return self.times[0]

    @property
    def end_time(self) -> float:
        """End of the span covered by the final sample's hold."""
        return self.times[-1] + self.sample_interval

    @property
    def max_power(self) -> float:
        return max(self.powers)

    @property
    def mean_power(self) -> float:
        return sum(self.powers) / len(self.powers)

    def scaled(self, factor: float) -> "HarvesterTrace":
        return replace(self, powers=tuple(p * factor for p in self.powers))

    def index_at(self, t: float) -> int:
        if t < self.start_time or t > self.end_time:
            raise OutOfRange(f"t={t} outside [{self.start_time}, {self.end_time}]")
        idx = int((t - self.start_time) / self.sample_interval)
        return min(idx, len(self.powers) - 1)


def trace_power_at(trace: HarvesterTrace, t: float) -> float:
    """Zero-order hold: power of the most recent sample at or before ``t``."""
    _check_finite(t)
    return trace.powers[trace.index_at(t)]


def constant_trace(power_mw: float, duration_s: float, sample_interval: float = 1.0) -> HarvesterTrace:
    n = max(1, int(round(duration_s / sample_interval)))
    times = tuple(i * sample_interval for i in range(n))
    return HarvesterTrace(times, (power_mw,) * n, sample_interval)


def load_trace_csv(path: str) -> HarvesterTrace:
    """Load ``time_s,power_mw`` CSV, rejecting malformed rows by line number."""
    times: list[float] = []
    powers: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError("line 1: empty file") from None
        if [c.strip() for c in header] != ["time_s", "power_mw"]:
            raise TraceFormatError(f"line 1: header must be 'time_s,power_mw', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise TraceFormatError(f"line {lineno}: expected 2 columns, got {len(row)}")
            try:
                t, p = float(row[0]), float(row[1])
            except ValueError:
                raise TraceFormatError(f"line {lineno}: non-numeric field in {row}") from None
            if not (math.isfinite(t) and math.isfinite(p)):
                raise TraceFormatError(f"line {lineno}: non-finite value")
            if p < 0:
                raise TraceFormatError(f"line {lineno}: negative power {p}")
            if times and t <= times[-1]:
                raise TraceFormatError(f"line {lineno}: time {t} not increasing")
            times.append(t)
            powers.append(p)
    if len(times) < 2:
        raise TraceFormatError("line 2: need at least two samples")
    interval = times[1] - times[0]
    for i in range(2, len(times)):
        if abs((times[i] - times[i - 1]) - interval) > 1e-9 * max(1.0, interval):
            raise TraceFormatError(f"line {i + 2}: non-uniform spacing")
    return HarvesterTrace(tuple(times), tuple(powers), interval)


# ---------------------------------------------------------------------------
# Energy buffers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyBuffer:
    """One capacitor of the federated store.  Immutable value type."""

    capacitance: float               # farads
    parallel_resistance: float       # ohms
    voltage: float = 0.0             # volts
    efficiency: float = 0.9          # eta, (0, 1]
    leakage_fraction: float = 0.01   # sigma, per slot, [0, 1)

    def __post_init__(self):
        _check_finite(self.capacitance, self.parallel_resistance, self.voltage,
                      self.efficiency, self.leakage_fraction)
        if self.capacitance <= 0 or self.parallel_resistance <= 0:
            raise ValueError("capacitance and parallel_resistance must be positive")
        if not (0 < self.efficiency <= 1):
            raise ValueError("efficiency must be in (0, 1]")
        if not (0 <= self.leakage_fraction < 1):
            raise ValueError("leakage_fraction must be in [0, 1)")
        if self.voltage < 0:
            raise ValueError("voltage must be non-negative")

    @property
    def energy(self) -> float:
        """Stored energy in joules, 0.5 * C * V^2."""
        return 0.5 * self.capacitance * self.voltage * self.voltage

    def with_energy(self, energy_j: float) -> "EnergyBuffer":
        if energy_j < 0:
            raise ValueError(f"negative energy {energy_j}")
        return replace(self, voltage=math.sqrt(2.0 * energy_j / self.capacitance))

    def steady_state_cap(self, power_mw: float) -> float:
        """Max storable energy while charging at ``power_mw`` (RC steady state)."""
        return 0.5 * self.capacitance * ((power_mw / 1000.0) * self.parallel_resistance)


def capacitor_voltage(power_mw: float, buffer: EnergyBuffer, v0: float, elapsed: float) -> float:
    """Continuous RC charging curve v(t), monotone toward sqrt(P*r_p)."""
    _check_finite(power_mw, v0, elapsed)
    if power_mw < 0:
        raise ValueError("power must be non-negative")
    if elapsed < 0:
        raise ValueError("elapsed must be non-negative")
    p_watts = power_mw / 1000.0
    p_rp = p_watts * buffer.parallel_resistance
    tau = buffer.capacitance * buffer.parallel_resistance
    radicand = p_rp - math.exp(-2.0 * elapsed / tau) * (p_rp - v0 * v0)
    if radicand < -RADICAND_TOLERANCE:
        raise NegativeRadicand(f"radicand {radicand} below -{RADICAND_TOLERANCE}")
    return math.sqrt(max(radicand, 0.0))


def buffer_step(buffer: EnergyBuffer, harvest_power_mw: float, slot_s: float) -> EnergyBuffer:
    """One slot of the energy recurrence, overflow above the RC cap discarded.

    The cap only discards incoming harvest; energy already stored (from an
    earlier, stronger charging regime) decays through leakage alone.
    """
    _check_finite(harvest_power_mw, slot_s)
    if slot_s <= 0:
        raise ValueError("slot must be positive")
    if harvest_power_mw < 0:
        raise ValueError("power must be non-negative")
    e = buffer.energy
    decayed = (1.0 - buffer.leakage_fraction) * e
    charged = decayed + buffer.efficiency * (harvest_power_mw / 1000.0) * slot_s
    cap = buffer.steady_state_cap(harvest_power_mw)
    return buffer.with_energy(min(charged, max(cap, decayed)))


# ---------------------------------------------------------------------------
# Federated store and the harvest split
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FederatedStore:
    """Two isolated buffers: one for MCU+sensing, one for the radio."""

    buffer_sense: EnergyBuffer
    buffer_radio: EnergyBuffer
    split_high: float = 0.7   # share for the buffer backing the active task
    split_low: float = 0.3

    def __post_init__(self):
        _check_finite(self.split_high, self.split_low)
        if abs(self.split_high + self.split_low - 1.0) > 1e-12:
            raise ValueError("split_high + split_low must equal 1")
        if not (self.split_high > self.split_low > 0):
            raise ValueError("need split_high > split_low > 0")

    @property
    def total_energy(self) -> float:
        return self.buffer_sense.energy + self.buffer_radio.energy


def split_harvest(store: FederatedStore, harvest_power_mw: float,
                  sense_active: bool) -> tuple[float, float]:
    """Allocate harvested power (sense share, radio share), conserving the sum.

    The buffer backing a ready/running sense task receives the high share;
    otherwise the radio buffer does.
    """
    _check_finite(harvest_power_mw)
    if harvest_power_mw < 0:
        raise ValueError("power must be non-negative")
    if sense_active:
        sense_share = store.split_high * harvest_power_mw
    else:
        sense_share = store.split_low * harvest_power_mw
    return sense_share, harvest_power_mw - sense_share


# ---------------------------------------------------------------------------
# Closed-form multi-slot advance
# ---------------------------------------------------------------------------

@dataclass
class AdvanceResult:
    energy: float     # joules after n slots
    inflow: float     # eta * P * t * n offered to the buffer
    leak: float       # total sigma-leakage
    overflow: float   # harvest discarded at the cap
    # per requested threshold: slot offset (1-based, None if no crossing) at
    # which stored energy first reached / first dropped below the threshold
    rise_slots: tuple = ()
    fall_slots: tuple = ()


def advance_buffer(buffer: EnergyBuffer, power_mw: float, slot_s: float,
                   n_slots: int, thresholds: Sequence[float] = ()) -> AdvanceResult:
    """Apply ``n_slots`` iterations of ``buffer_step`` in closed form.

    For each entry of ``thresholds``, also report the first slot at which
    energy crosses it upward (``rise_slots``) or downward (``fall_slots``),
    measured against ``energy >= threshold`` at slot boundaries.

    The per-slot rule is e' = min(q*e + a, max(cap, q*e)) with q = 1-sigma
    and a = eta*P*t.  The trajectory is piecewise monotone (decay above the
    cap, geometric toward a/sigma, or pinned at the cap), so each regime is
    summed in one jump; regime boundaries take exact single-slot steps.
    """
    _check_finite(power_mw, slot_s)
    if n_slots < 0:
        raise ValueError("n_slots must be non-negative")
    sigma = buffer.leakage_fraction
    a = buffer.efficiency * (power_mw / 1000.0) * slot_s
    cap = buffer.steady_state_cap(power_mw)
    e = buffer.energy
    res = AdvanceResult(energy=e, inflow=a * n_slots, leak=0.0, overflow=0.0)

    above = [e >= thr for thr in thresholds]
    rises: list[int | None] = [None] * len(thresholds)
    falls: list[int | None] = [None] * len(thresholds)

    def note(fn, m: int, done: int) -> None:
        # fn(k) = energy after k slots of the current regime, monotone in k
        if not thresholds or m == 0:
            return
        e_end = fn(m)
        for i, thr in enumerate(thresholds):
            if above[i] and e_end < thr:
                k = _first_below(fn, thr, m)
                if falls[i] is None:
                    falls[i] = done + k
                above[i] = False
            elif not above[i] and e_end >= thr:
                k = _first_at_or_above(fn, thr, m)
                if rises[i] is None:
                    rises[i] = done + k
                above[i] = True

    def single_step(done: int) -> None:
        # exact per-slot rule, used at regime boundaries
        nonlocal e
        decayed = (1.0 - sigma) * e
        charged = decayed + a
        stepped = min(charged, max(cap, decayed))
        res.leak += sigma * e
        res.overflow += charged - stepped
        note(lambda k, s=stepped: s, 1, done)
        e = stepped

    remaining = n_slots
    done = 0
    while remaining > 0:
        if sigma == 0.0:
            if a == 0.0 or e >= cap:
                # flat: incoming harvest (if any) is discarded
                res.overflow += a * remaining
                note(lambda k, lvl=e: lvl, remaining, done)
                done += remaining
                remaining = 0
            else:
                m = min(remaining, max(0, math.floor((cap - e) / a)))
                if m > 0:
                    e0 = e
                    note(lambda k, e0=e0: e0 + a * k, m, done)
                    e = e0 + a * m
                    done += m
                    remaining -= m
                else:
                    single_step(done)
                    done += 1
                    remaining -= 1
            continue

        q = 1.0 - sigma
        fp = a / sigma  # uncapped fixed point
        if q * e >= cap and e > 0:
            # decay regime: harvest fully discarded while q*e stays >= cap
            if cap <= 0.0:
                m = remaining
            else:
                m = min(remaining, max(1, math.floor(math.log(cap / e) / math.log(q)) - 1))
            e0 = e
            note(lambda k, e0=e0: e0 * (q ** k), m, done)
            e_end = e0 * (q ** m)
            res.leak += e0 - e_end
            res.overflow += a * m
            e = e_end
            done += m
            remaining -= m
        elif fp <= cap:
            # uncapped geometric toward the fixed point, cap never binds
            if q * e + a > cap:
                single_step(done)  # entered from above the cap
                done += 1
                remaining -= 1
                continue
            m = remaining
            e0 = e
            note(lambda k, e0=e0: fp + (e0 - fp) * (q ** k), m, done)
            e_end = fp + (e0 - fp) * (q ** m)
            res.leak += sigma * (fp * m + (e0 - fp) * (1.0 - q ** m) / sigma)
            e = e_end
            done += m
            remaining -= m
        elif q * e + a >= cap:
            # pinned at the cap; one exact entry step, then bulk
            single_step(done)
            done += 1
            remaining -= 1
            if remaining > 0 and e == cap:
                res.leak += sigma * cap * remaining
                res.overflow += (a - sigma * cap) * remaining
                note(lambda k: cap, remaining, done)
                done += remaining
                remaining = 0
        else:
            # rising toward fp > cap but still below it; jump to just under
            # the cap, then the pinned branch takes the boundary slot
            ratio = (fp - cap) / (fp - e)
            m = min(remaining, max(0, math.floor(math.log(ratio) / math.log(q)) - 1))
            if m > 0:
                e0 = e
                e_end = fp + (e0 - fp) * (q ** m)
                if e_end > cap:
                    m = 0  # float overshoot; fall through to a single step
                else:
                    note(lambda k, e0=e0: fp + (e0 - fp) * (q ** k), m, done)
                    res.leak += sigma * (fp * m + (e0 - fp) * (1.0 - q ** m) / sigma)
                    e = e_end
                    done += m
                    remaining -= m
            if m == 0:
                single_step(done)
                done += 1
                remaining -= 1

    res.energy = e
    res.rise_slots = tuple(rises)
    res.fall_slots = tuple(falls)
    return res


def _first_at_or_above(fn, threshold: float, m: int) -> int:
    lo, hi = 1, m
    while lo < hi:
        mid = (lo + hi) // 2
        if fn(mid) >= threshold:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _first_below(fn, threshold: float, m: int) -> int:
    lo, hi = 1, m
    while lo < hi:
        mid = (lo + hi) // 2
        if fn(mid) < threshold:
            hi = mid
        else:
            lo = mid + 1
    return lo


def slots_until(buffer: EnergyBuffer, power_mw: float, slot_s: float,
                threshold: float, max_slots: int) -> int | None:
    """Smallest slot count at which energy first satisfies >= threshold.

    Returns None when the threshold is unreachable within ``max_slots`` under
    constant ``power_mw``.  A buffer already at or above the threshold
    returns 0.
    """
    if buffer.energy >= threshold:
        return 0
    res = advance_buffer(buffer, power_mw, slot_s, max_slots, thresholds=(threshold,))
    return res.rise_slots[0]
