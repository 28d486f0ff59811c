"""Wire messages, packets, codecs, and per-application channel assignment.

Two packet types cross the air: the aggregator's broadcast beacon and the
module's sensor-data reply.  Layout (documented bit-exactly in docs/wire.md):
little-endian fixed-width integers, a 2-byte magic per packet type, a 1-byte
version, and explicit list-length prefixes.  Sensor values travel as signed
32-bit integers scaled by 1000.  Every decode failure is a typed ``Malformed``
carrying the byte offset; no input crashes the decoders.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

WIRE_VERSION = 1
BEACON_MAGIC = b"\xb5\x1a"
SENSOR_MAGIC = b"\x5d\xa7"
MAX_PDU_BYTES = 251          # BLE data PDU payload ceiling
MAX_APPS = 40                # one BLE channel per application
VALUE_SCALE = 1000           # sensor value fixed-point scale


class ProtocolError(Exception):
    pass


class Malformed(ProtocolError):
    """Undecodable input; ``offset`` is the byte position of the failure."""

    def __init__(self, offset: int, reason: str):
        self.offset = offset
        super().__init__(f"byte {offset}: {reason}")


class Oversize(ProtocolError):
    """Encoding would exceed the 251-byte PDU budget."""


class TooManyApps(ProtocolError):
    """Application id beyond the 40 available channels."""


@dataclass(frozen=True)
class ChannelId:
    index: int

    def __post_init__(self):
        if not 0 <= self.index <= MAX_APPS - 1:
            raise ValueError(f"channel index {self.index} outside [0, {MAX_APPS - 1}]")


def channel_for_app(app_id: int) -> ChannelId:
    """Fixed injective mapping: application i uses channel i-1."""
    if app_id < 1:
        raise ValueError(f"app_id must be >= 1, got {app_id}")
    if app_id > MAX_APPS:
        raise TooManyApps(f"app {app_id} exceeds the {MAX_APPS}-channel budget")
    return ChannelId(app_id - 1)


# ---------------------------------------------------------------------------
# Message bodies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorReading:
    sensor_id: int
    value: int            # scaled integer, value * 1000
    sample_time_ms: int

    def __post_init__(self):
        if not 0 <= self.sensor_id <= 0xFF:
            raise ValueError(f"sensor_id {self.sensor_id} outside u8")
        if not -(2**31) <= self.value < 2**31:
            raise ValueError("value outside i32")
        if not 0 <= self.sample_time_ms < 2**32:
            raise ValueError("sample_time_ms outside u32")


def scale_value(x: float) -> int:
    """Fixed-point encode a sensor value for the wire."""
    return int(round(x * VALUE_SCALE))


@dataclass(frozen=True)
class SensorDataMsg:
    app_id: int
    module_id: int
    readings: tuple[SensorReading, ...]

    def __post_init__(self):
        _check_u8("app_id", self.app_id, minimum=1)
        _check_u8("module_id", self.module_id, minimum=1)
        if not self.readings:
            raise ValueError("readings must be non-empty")


@dataclass(frozen=True)
class RateControlMsg:
    rate_current: tuple[int, ...]   # readings per period, one slot per module
    rate_new: tuple[int, ...]

    def __post_init__(self):
        if len(self.rate_current) != len(self.rate_new):
            raise ValueError("rate lists must have equal length")
        for r in (*self.rate_current, *self.rate_new):
            if not 0 <= r <= 0xFFFF:
                raise ValueError(f"rate {r} outside u16")


@dataclass(frozen=True)
class AppSynchMsg:
    sync_current: tuple[int, ...]   # V, readings received this period
    sync_new: tuple[int, ...]       # V-hat, readings solicited

    def __post_init__(self):
        if len(self.sync_current) != len(self.sync_new):
            raise ValueError("sync vectors must have equal length")
        bump = 0
        for cur, new in zip(self.sync_current, self.sync_new):
            if not (0 <= cur <= 0xFFFF and 0 <= new <= 0xFFFF):
                raise ValueError("sync counts outside u16")
            if new < cur:
                raise ValueError("sync_new must be >= sync_current componentwise")
            bump += new - cur
        if bump > 1:
            raise ValueError("at most one reading may be solicited per beacon")


@dataclass(frozen=True)
class ActuatorControlMsg:
    state: bool            # True = on
    target_module: int

    def __post_init__(self):
        _check_u8("target_module", self.target_module, minimum=1)


# ---------------------------------------------------------------------------
# Packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Beacon:
    app_id: int
    seq: int
    rate_control: RateControlMsg
    app_synch: AppSynchMsg
    actuator_control: ActuatorControlMsg | None = None

    def __post_init__(self):
        _check_u8("app_id", self.app_id, minimum=1)
        if not 0 <= self.seq < 2**32:
            raise ValueError("seq outside u32")
        if not self.rate_control.rate_current:
            raise ValueError("beacon must cover at least one module")
        if len(self.rate_control.rate_current) != len(self.app_synch.sync_current):
            raise ValueError("rate and sync vectors must cover the same modules")


@dataclass(frozen=True)
class SensorDataPacket:
    app_id: int
    module_id: int
    in_reply_to: int                 # soliciting beacon seq
    payload: SensorDataMsg
    device_state_lp: bool = False    # sender's LP/NML state, piggy-backed
    energy_nj: int = 0               # sender's stored energy, piggy-backed

    def __post_init__(self):
        _check_u8("app_id", self.app_id, minimum=1)
        _check_u8("module_id", self.module_id, minimum=1)
        if not 0 <= self.in_reply_to < 2**32:
            raise ValueError("in_reply_to outside u32")
        if not 0 <= self.energy_nj < 2**32:
            raise ValueError("energy_nj outside u32")
        if (self.payload.app_id, self.payload.module_id) != (self.app_id, self.module_id):
            raise ValueError("payload ids must match packet ids")


def _check_u8(name: str, v: int, minimum: int = 0) -> None:
    if not minimum <= v <= 0xFF:
        raise ValueError(f"{name} {v} outside [{minimum}, 255]")


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def encode_beacon(b: Beacon) -> bytes:
    out = bytearray(BEACON_MAGIC)
    out.append(WIRE_VERSION)
    out.append(b.app_id)
    out += struct.pack("<I", b.seq)
    n = len(b.rate_control.rate_current)
    out.append(n)
    for r in b.rate_control.rate_current:
        out += struct.pack("<H", r)
    for r in b.rate_control.rate_new:
        out += struct.pack("<H", r)
    for v in b.app_synch.sync_current:
        out += struct.pack("<H", v)
    for v in b.app_synch.sync_new:
        out += struct.pack("<H", v)
    if b.actuator_control is None:
        out.append(0)
    else:
        out.append(1)
        out.append(1 if b.actuator_control.state else 0)
        out.append(b.actuator_control.target_module)
    if len(out) > MAX_PDU_BYTES:
        raise Oversize(f"beacon is {len(out)} bytes; {MAX_PDU_BYTES} allowed "
                       "(too many modules for one beacon)")
    return bytes(out)


def encode_sensor_packet(p: SensorDataPacket) -> bytes:
    out = bytearray(SENSOR_MAGIC)
    out.append(WIRE_VERSION)
    out.append(p.app_id)
    out.append(p.module_id)
    out += struct.pack("<I", p.in_reply_to)
    out.append(1 if p.device_state_lp else 0)
    out += struct.pack("<I", p.energy_nj)
    out.append(len(p.payload.readings))
    for r in p.payload.readings:
        out.append(r.sensor_id)
        out += struct.pack("<i", r.value)
        out += struct.pack("<I", r.sample_time_ms)
    if len(out) > MAX_PDU_BYTES:
        raise Oversize(f"sensor packet is {len(out)} bytes; {MAX_PDU_BYTES} allowed")
    return bytes(out)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Malformed(self.pos, f"truncated: need {n} more bytes")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise Malformed(self.pos, f"{len(self.data) - self.pos} trailing bytes")


def decode_beacon(data: bytes) -> Beacon:
    cur = _Cursor(bytes(data))
    if cur.take(2) != BEACON_MAGIC:
        raise Malformed(0, "bad beacon magic")
    if cur.u8() != WIRE_VERSION:
        raise Malformed(2, "unsupported wire version")
    app_id = cur.u8()
    seq = cur.u32()
    n = cur.u8()
    if n == 0:
        raise Malformed(cur.pos - 1, "zero modules in beacon")
    try:
        rate_cur = tuple(cur.u16() for _ in range(n))
        rate_new = tuple(cur.u16() for _ in range(n))
        sync_cur = tuple(cur.u16() for _ in range(n))
        sync_new = tuple(cur.u16() for _ in range(n))
        act = None
        if cur.u8() == 1:
            state = cur.u8()
            target = cur.u8()
            act = _build(cur, lambda: ActuatorControlMsg(state == 1, target))
        cur.expect_end()
        return _build(cur, lambda: Beacon(
            app_id=app_id, seq=seq,
            rate_control=RateControlMsg(rate_cur, rate_new),
            app_synch=AppSynchMsg(sync_cur, sync_new),
            actuator_control=act))
    except Malformed:
        raise
    except ValueError as exc:
        raise Malformed(cur.pos, f"invariant violation: {exc}") from None


def decode_sensor_packet(data: bytes) -> SensorDataPacket:
    cur = _Cursor(bytes(data))
    if cur.take(2) != SENSOR_MAGIC:
        raise Malformed(0, "bad sensor-packet magic")
    if cur.u8() != WIRE_VERSION:
        raise Malformed(2, "unsupported wire version")
    app_id = cur.u8()
    module_id = cur.u8()
    in_reply_to = cur.u32()
    lp = cur.u8()
    if lp not in (0, 1):
        raise Malformed(cur.pos - 1, f"device state byte must be 0/1, got {lp}")
    energy_nj = cur.u32()
    n = cur.u8()
    if n == 0:
        raise Malformed(cur.pos - 1, "zero readings")
    try:
        readings = []
        for _ in range(n):
            sid = cur.u8()
            val = cur.i32()
            ts = cur.u32()
            readings.append(_build(cur, lambda: SensorReading(sid, val, ts)))
        cur.expect_end()
        return _build(cur, lambda: SensorDataPacket(
            app_id=app_id, module_id=module_id, in_reply_to=in_reply_to,
            payload=SensorDataMsg(app_id, module_id, tuple(readings)),
            device_state_lp=lp == 1, energy_nj=energy_nj))
    except Malformed:
        raise
    except ValueError as exc:
        raise Malformed(cur.pos, f"invariant violation: {exc}") from None


def _build(cur: _Cursor, ctor):
    try:
        return ctor()
    except ValueError as exc:
        raise Malformed(cur.pos, f"invariant violation: {exc}") from None


# ---------------------------------------------------------------------------
# Hex dump for the `codec` CLI subcommand
# ---------------------------------------------------------------------------

def describe_packet(data: bytes) -> str:
    """Decode a packet of either type and render its fields, one per line."""
    if data[:2] == BEACON_MAGIC:
        b = decode_beacon(data)
        lines = [
            "type: beacon",
            f"app_id: {b.app_id}",
            f"seq: {b.seq}",
            f"rate_current: {list(b.rate_control.rate_current)}",
            f"rate_new: {list(b.rate_control.rate_new)}",
            f"sync_current: {list(b.app_synch.sync_current)}",
            f"sync_new: {list(b.app_synch.sync_new)}",
        ]
        if b.actuator_control is not None:
            lines.append(f"actuator: module {b.actuator_control.target_module} "
                         f"-> {'on' if b.actuator_control.state else 'off'}")
        else:
            lines.append("actuator: none")
        return "\n".join(lines)
    if data[:2] == SENSOR_MAGIC:
        p = decode_sensor_packet(data)
        lines = [
            "type: sensor_data",
            f"app_id: {p.app_id}",
            f"module_id: {p.module_id}",
            f"in_reply_to: {p.in_reply_to}",
            f"device_state: {'LP' if p.device_state_lp else 'NML'}",
            f"energy_nj: {p.energy_nj}",
        ]
        for r in p.payload.readings:
            lines.append(f"reading: sensor {r.sensor_id} value {r.value / VALUE_SCALE} "
                         f"at {r.sample_time_ms} ms")
        return "\n".join(lines)
    raise Malformed(0, "unknown packet magic")
