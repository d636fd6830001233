"""Binary codec for the five inter-device message types.

Every message starts with a one-byte type id. Multi-byte integers are
big-endian and 4-byte reals are IEEE-754 single precision, big-endian.

    0x01 Initialization  id u64 | type u8 | n u8 | n*(len u8, id, cost f32) | k u8 | k*(fn u8, energy f32)
    0x02 ContextSensor   id u64 | battery u8 | charging u8 | moving u8 | net u8 | len u8 | net id | speed f32
    0x03 ContextRequest  request type u8 | info len u32 | info
    0x04 Assignments     n u8 | n*(request u8, device u8) | k u8 | k*(function u8, device u8)
    0x05 Data            *(request type u8, len u32, data)   -- entries run to the end of the buffer
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Union

from .core import Activity, DeviceKind, EnergyCatalog, FunctionType, NetworkKind, transfer_energy
from .errors import FieldOverflow, InvalidEnum, TrailingBytes, Truncated, UnknownType

INITIALIZATION = 0x01
CONTEXT_SENSOR = 0x02
CONTEXT_REQUEST = 0x03
ASSIGNMENTS = 0x04
DATA = 0x05

NO_NETWORK = 0  # network-kind byte when the device is not connected

_F32 = struct.Struct(">f")
_U32_MAX = 2**32 - 1


@dataclass(frozen=True)
class NetworkEntry:
    network_id: bytes
    monetary_cost: float


@dataclass(frozen=True)
class FunctionEntry:
    function_type: int
    energy: float


@dataclass(frozen=True)
class InitializationMsg:
    device_id: int
    device_type: int
    networks: tuple[NetworkEntry, ...] = ()
    functions: tuple[FunctionEntry, ...] = ()


@dataclass(frozen=True)
class ContextSensorMsg:
    device_id: int
    battery_level: int
    charging: int
    moving: int
    network_kind: int = NO_NETWORK
    net_id: bytes = b""
    avg_link_speed: float = 0.0


@dataclass(frozen=True)
class ContextRequestMsg:
    request_type: int
    info: bytes = b""


@dataclass(frozen=True)
class AssignmentsMsg:
    rd_pairs: tuple[tuple[int, int], ...] = ()
    vd_pairs: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class DataMsg:
    entries: tuple[tuple[int, bytes], ...] = ()


WireMessage = Union[InitializationMsg, ContextSensorMsg, ContextRequestMsg, AssignmentsMsg, DataMsg]

MESSAGE_TYPES = {
    InitializationMsg: INITIALIZATION,
    ContextSensorMsg: CONTEXT_SENSOR,
    ContextRequestMsg: CONTEXT_REQUEST,
    AssignmentsMsg: ASSIGNMENTS,
    DataMsg: DATA,
}

_DEVICE_TYPES = {k.value for k in DeviceKind}
_FUNCTIONS = {f.value for f in FunctionType}
_ACTIVITIES = {a.value for a in Activity}
_NETWORKS = {NO_NETWORK} | {n.value for n in NetworkKind}


# ---------------------------------------------------------------------------
# encoding


def _u8(value, what):
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 0xFF:
        raise FieldOverflow(f"{what} must fit one unsigned byte, got {value!r}")
    return bytes((value,))


def _count(seq, what):
    if len(seq) > 0xFF:
        raise FieldOverflow(f"{what}: {len(seq)} entries exceed the 1-byte count")
    return bytes((len(seq),))


def _f32(value, what):
    try:
        return _F32.pack(value)
    except (OverflowError, struct.error) as exc:
        raise FieldOverflow(f"{what} does not fit an f32: {value!r}") from exc


def _short_bytes(data, what):
    if len(data) > 0xFF:
        raise FieldOverflow(f"{what}: {len(data)} bytes exceed the 1-byte length")
    return bytes((len(data),)) + bytes(data)


def _long_bytes(data, what):
    if len(data) > _U32_MAX:
        raise FieldOverflow(f"{what}: {len(data)} bytes exceed the 4-byte length")
    return len(data).to_bytes(4, "big") + bytes(data)


def _enum_byte(value, allowed, what):
    out = _u8(value, what)
    if value not in allowed:
        raise InvalidEnum(f"{what} {value} is not a declared value")
    return out


def encode(msg: WireMessage) -> bytes:
    if isinstance(msg, InitializationMsg):
        if not 0 <= msg.device_id < 2**64:
            raise FieldOverflow("device_id must fit 64 bits")
        out = [bytes((INITIALIZATION,)), msg.device_id.to_bytes(8, "big"),
               _enum_byte(msg.device_type, _DEVICE_TYPES, "device_type"), _count(msg.networks, "networks")]
        for net in msg.networks:
            out += [_short_bytes(net.network_id, "network id"), _f32(net.monetary_cost, "monetary cost")]
        out.append(_count(msg.functions, "functions"))
        for fn in msg.functions:
            out += [_enum_byte(fn.function_type, _FUNCTIONS, "function type"), _f32(fn.energy, "energy")]
        return b"".join(out)
    if isinstance(msg, ContextSensorMsg):
        if not 0 <= msg.device_id < 2**64:
            raise FieldOverflow("device_id must fit 64 bits")
        _u8(msg.battery_level, "battery_level")
        if msg.battery_level > 100:
            raise InvalidEnum("battery_level above 100")
        return b"".join([
            bytes((CONTEXT_SENSOR,)), msg.device_id.to_bytes(8, "big"), bytes((msg.battery_level,)),
            _enum_byte(msg.charging, (0, 1), "charging"), _enum_byte(msg.moving, _ACTIVITIES, "moving"),
            _enum_byte(msg.network_kind, _NETWORKS, "network_kind"), _short_bytes(msg.net_id, "network id"),
            _f32(msg.avg_link_speed, "avg_link_speed"),
        ])
    if isinstance(msg, ContextRequestMsg):
        return b"".join([bytes((CONTEXT_REQUEST,)), _enum_byte(msg.request_type, _FUNCTIONS, "request_type"),
                         _long_bytes(msg.info, "request info")])
    if isinstance(msg, AssignmentsMsg):
        out = [bytes((ASSIGNMENTS,)), _count(msg.rd_pairs, "request/device pairs")]
        out += [_u8(r, "request") + _u8(d, "device") for r, d in msg.rd_pairs]
        out.append(_count(msg.vd_pairs, "function/device pairs"))
        out += [_enum_byte(v, _FUNCTIONS, "function") + _u8(d, "device") for v, d in msg.vd_pairs]
        return b"".join(out)
    if isinstance(msg, DataMsg):
        out = [bytes((DATA,))]
        for request_type, data in msg.entries:
            out += [_enum_byte(request_type, _FUNCTIONS, "request_type"), _long_bytes(data, "data")]
        return b"".join(out)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def wire_size(msg: WireMessage) -> int:
    """Encoded length in bytes, computed from the field widths."""
    if isinstance(msg, InitializationMsg):
        return 1 + 8 + 1 + 1 + sum(1 + len(n.network_id) + 4 for n in msg.networks) + 1 + 5 * len(msg.functions)
    if isinstance(msg, ContextSensorMsg):
        return 1 + 8 + 1 + 1 + 1 + 1 + 1 + len(msg.net_id) + 4
    if isinstance(msg, ContextRequestMsg):
        return 1 + 1 + 4 + len(msg.info)
    if isinstance(msg, AssignmentsMsg):
        return 1 + 1 + 2 * len(msg.rd_pairs) + 1 + 2 * len(msg.vd_pairs)
    if isinstance(msg, DataMsg):
        return 1 + sum(1 + 4 + len(data) for _, data in msg.entries)
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def message_energy(catalog: EnergyCatalog, device_kind: DeviceKind, msg: WireMessage,
                   transport: NetworkKind = NetworkKind.BLUETOOTH) -> float:
    """mJ one endpoint spends moving ``msg`` over ``transport``."""
    return transfer_energy(catalog, device_kind, transport, wire_size(msg))


# ---------------------------------------------------------------------------
# decoding


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(bytes(buf))
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def f32(self) -> float:
        return _F32.unpack(self.take(4))[0]

    def enum(self, allowed, what) -> int:
        value = self.u8()
        if value not in allowed:
            raise InvalidEnum(f"{what} {value} is not a declared value")
        return value

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos


def decode(data: bytes) -> WireMessage:
    rd = _Reader(data)
    kind = rd.u8()
    if kind == INITIALIZATION:
        device_id = rd.u64()
        device_type = rd.enum(_DEVICE_TYPES, "device_type")
        networks = []
        for _ in range(rd.u8()):
            net_id = rd.take(rd.u8())
            networks.append(NetworkEntry(net_id, rd.f32()))
        functions = []
        for _ in range(rd.u8()):
            fn = rd.enum(_FUNCTIONS, "function type")
            functions.append(FunctionEntry(fn, rd.f32()))
        msg = InitializationMsg(device_id, device_type, tuple(networks), tuple(functions))
    elif kind == CONTEXT_SENSOR:
        device_id = rd.u64()
        battery = rd.u8()
        if battery > 100:
            raise InvalidEnum("battery_level above 100")
        charging = rd.enum((0, 1), "charging")
        moving = rd.enum(_ACTIVITIES, "moving")
        net_kind = rd.enum(_NETWORKS, "network_kind")
        net_id = rd.take(rd.u8())
        msg = ContextSensorMsg(device_id, battery, charging, moving, net_kind, net_id, rd.f32())
    elif kind == CONTEXT_REQUEST:
        request_type = rd.enum(_FUNCTIONS, "request_type")
        msg = ContextRequestMsg(request_type, rd.take(rd.u32()))
    elif kind == ASSIGNMENTS:
        rd_pairs = tuple((rd.u8(), rd.u8()) for _ in range(rd.u8()))
        vd_pairs = []
        for _ in range(rd.u8()):
            fn = rd.enum(_FUNCTIONS, "function")
            vd_pairs.append((fn, rd.u8()))
        msg = AssignmentsMsg(rd_pairs, tuple(vd_pairs))
    elif kind == DATA:
        entries = []
        while rd.remaining:
            request_type = rd.enum(_FUNCTIONS, "request_type")
            entries.append((request_type, rd.take(rd.u32())))
        msg = DataMsg(tuple(entries))
    else:
        raise UnknownType(f"unknown message type 0x{kind:02x}")
    if rd.remaining:
        raise TrailingBytes(f"{rd.remaining} bytes after the end of the message")
    return msg


# ---------------------------------------------------------------------------
# JSON description <-> message, used by the golden fixtures and the CLI


def to_dict(msg: WireMessage) -> dict:
    if isinstance(msg, InitializationMsg):
        return {"type": "Initialization", "device_id": msg.device_id, "device_type": msg.device_type,
                "networks": [{"id": n.network_id.hex(), "monetary_cost": n.monetary_cost} for n in msg.networks],
                "functions": [{"function_type": f.function_type, "energy": f.energy} for f in msg.functions]}
    if isinstance(msg, ContextSensorMsg):
        return {"type": "ContextSensor", "device_id": msg.device_id, "battery_level": msg.battery_level,
                "charging": msg.charging, "moving": msg.moving, "network_kind": msg.network_kind,
                "net_id": msg.net_id.hex(), "avg_link_speed": msg.avg_link_speed}
    if isinstance(msg, ContextRequestMsg):
        return {"type": "ContextRequest", "request_type": msg.request_type, "info": msg.info.hex()}
    if isinstance(msg, AssignmentsMsg):
        return {"type": "Assignments", "rd_pairs": [list(p) for p in msg.rd_pairs],
                "vd_pairs": [list(p) for p in msg.vd_pairs]}
    if isinstance(msg, DataMsg):
        return {"type": "Data", "entries": [{"request_type": t, "data": d.hex()} for t, d in msg.entries]}
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def from_dict(d: dict) -> WireMessage:
    kind = d["type"]
    if kind == "Initialization":
        return InitializationMsg(
            int(d["device_id"]), int(d["device_type"]),
            tuple(NetworkEntry(bytes.fromhex(n["id"]), float(n["monetary_cost"])) for n in d.get("networks", [])),
            tuple(FunctionEntry(int(f["function_type"]), float(f["energy"])) for f in d.get("functions", [])))
    if kind == "ContextSensor":
        return ContextSensorMsg(int(d["device_id"]), int(d["battery_level"]), int(d["charging"]), int(d["moving"]),
                                int(d.get("network_kind", NO_NETWORK)), bytes.fromhex(d.get("net_id", "")),
                                float(d.get("avg_link_speed", 0.0)))
    if kind == "ContextRequest":
        return ContextRequestMsg(int(d["request_type"]), bytes.fromhex(d.get("info", "")))
    if kind == "Assignments":
        return AssignmentsMsg(tuple((int(r), int(v)) for r, v in d.get("rd_pairs", [])),
                              tuple((int(f), int(v)) for f, v in d.get("vd_pairs", [])))
    if kind == "Data":
        return DataMsg(tuple((int(e["request_type"]), bytes.fromhex(e["data"])) for e in d.get("entries", [])))
    raise UnknownType(f"unknown message description type {kind!r}")


def f32(value: float) -> float:
    """Round ``value`` to the nearest single-precision float."""
    if math.isnan(value):
        return value
    return _F32.unpack(_F32.pack(value))[0]
