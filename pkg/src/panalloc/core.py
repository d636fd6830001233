"""Domain model: devices, functions, registrations, contexts, preferences and
the per-function energy catalog.

All types are frozen dataclasses; every function here is pure.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import MissingEntry, ParseError, UnknownReference, UnknownTransport, UnsupportedFunction

NOMINAL_CELL_VOLTAGE = 3.8


def _norm(name: str) -> str:
    return name.replace("_", "").replace("-", "").replace(" ", "").lower()


class _Named(enum.IntEnum):
    """IntEnum parseable from its JSON spelling ("Tier2Sensor", "tier2_sensor", ...)."""

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, int) and not isinstance(value, bool):
            return cls(value)
        if isinstance(value, str):
            key = _norm(value)
            for member in cls:
                if _norm(member.name) == key:
                    return member
        raise ValueError(f"unknown {cls.__name__}: {value!r}")

    @property
    def label(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))


class DeviceKind(_Named):
    PHONE = 1
    WATCH = 2
    GLASS = 3
    TIER2_SENSOR = 4


class Tier(_Named):
    TIER1 = 1
    TIER2 = 2


class NetworkKind(_Named):
    WIFI = 1
    CELLULAR = 2
    BLUETOOTH = 3

    @property
    def label(self) -> str:
        return {1: "WiFi", 2: "Cellular", 3: "Bluetooth"}[self.value]


class FunctionCategory(enum.Enum):
    SENSING = "sensing"
    CONNECTIVITY = "connectivity"
    PROCESSING = "processing"


class FunctionType(_Named):
    ACCELEROMETER = 1
    GYROSCOPE = 2
    MAGNETOMETER = 3
    HEART_RATE = 4
    INTERNET_UPLOAD = 5
    INTERNET_DOWNLOAD = 6
    COMPRESSION = 7
    ENCODING = 8

    @property
    def category(self) -> FunctionCategory:
        if self.value <= 4:
            return FunctionCategory.SENSING
        if self.value <= 6:
            return FunctionCategory.CONNECTIVITY
        return FunctionCategory.PROCESSING


class SamplingSpeed(_Named):
    NORMAL = 0
    UI = 1
    GAME = 2
    FASTEST = 3

    @property
    def label(self) -> str:
        return self.name


class Activity(_Named):
    STILL = 0
    WALKING = 1
    BODY_STRETCH = 2
    HEAD_STRETCH = 3


class ObjectiveMode(_Named):
    QUALITY = 1
    ENERGY = 2
    MONETARY = 3


class Scope(_Named):
    # lower value = higher priority
    DEVICE = 1
    USER = 2
    APPLICATION = 3


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class NetworkProfile:
    network_kind: NetworkKind
    network_id: bytes = b""
    monetary_cost_per_MB: float = 0.0
    link_speed_Bps: float = 0.0

    def __post_init__(self):
        if self.monetary_cost_per_MB < 0:
            raise ValueError("monetary_cost_per_MB must be >= 0")
        if len(self.network_id) > 255:
            raise ValueError("network_id longer than 255 bytes")
        if self.link_speed_Bps < 0:
            raise ValueError("link_speed_Bps must be >= 0")


@dataclass(frozen=True)
class FunctionImplementation:
    function_type: FunctionType
    cost_f: float = 0.0


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    device_kind: DeviceKind
    tier: Tier = Tier.TIER1
    battery_capacity_mAh: float = 0.0
    networks: tuple[NetworkProfile, ...] = ()
    implementations: tuple[FunctionImplementation, ...] = ()
    paired_host: Optional[int] = None
    voltage_V: float = NOMINAL_CELL_VOLTAGE

    def __post_init__(self):
        if not 0 <= self.device_id < 2**64:
            raise ValueError("device_id must fit in 64 bits")
        if self.battery_capacity_mAh < 0:
            raise ValueError("battery capacity must be >= 0")
        if self.tier is Tier.TIER1:
            if self.battery_capacity_mAh <= 0:
                raise ValueError(f"Tier-1 device {self.device_id} needs a positive battery capacity")
        else:
            if self.networks:
                raise ValueError("Tier-2 devices have no networks")
            if self.paired_host is None:
                raise ValueError("Tier-2 devices need a paired host")
            if any(i.function_type.category is not FunctionCategory.SENSING for i in self.implementations):
                raise ValueError("Tier-2 devices only implement sensing functions")

    @property
    def capacity_mJ(self) -> float:
        # mAh * V * 3.6 = J
        return self.battery_capacity_mAh * self.voltage_V * 3.6 * 1000.0

    def implements(self, function_type: FunctionType) -> bool:
        return any(i.function_type == function_type for i in self.implementations)

    def network(self, kind: NetworkKind, network_id: Optional[bytes] = None) -> Optional[NetworkProfile]:
        for net in self.networks:
            if net.network_kind == kind and (network_id is None or net.network_id == network_id):
                return net
        return None


@dataclass(frozen=True)
class Registration:
    app_id: str
    function_type: FunctionType
    origin_device: int
    sampling_speed: SamplingSpeed = SamplingSpeed.NORMAL
    report_interval_s: float = 60.0
    payload_bytes_per_report: int = 0
    precision_spec: tuple[tuple[str, tuple[float, float]], ...] = ()
    forced_mapping: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not self.report_interval_s > 0:
            raise ValueError("report_interval_s must be > 0")
        if self.payload_bytes_per_report < 0:
            raise ValueError("payload must be >= 0")
        for name, (lo, hi) in self.precision_spec:
            if lo > hi:
                raise ValueError(f"precision range for {name!r} has min > max")


@dataclass(frozen=True)
class Preference:
    scope: Scope
    subject: object
    rules: tuple[tuple[str, object], ...]

    def __post_init__(self):
        if not self.rules:
            raise ValueError("a preference needs at least one rule")


@dataclass(frozen=True)
class ContextSnapshot:
    device_id: int
    battery_soc_percent: int = 100
    charging: bool = False
    moving: Activity = Activity.STILL
    connected_network: Optional[tuple[NetworkKind, bytes]] = None
    avg_link_speed_Bps: float = 0.0

    def __post_init__(self):
        if not 0 <= self.battery_soc_percent <= 100:
            raise ValueError("battery_soc_percent must be within 0..100")


@dataclass(frozen=True)
class Objective:
    mode: ObjectiveMode = ObjectiveMode.ENERGY


# ---------------------------------------------------------------------------
# energy catalog


@dataclass(frozen=True)
class LinkCost:
    per_byte_mJ: float
    high_idle_mJ: float
    low_idle_mJ: Optional[float] = None


@dataclass(frozen=True)
class EnergyCatalog:
    sensing: Mapping[tuple[DeviceKind, FunctionType, SamplingSpeed], float]
    links: Mapping[tuple[DeviceKind, NetworkKind], LinkCost]
    processing: Mapping[tuple[DeviceKind, FunctionType], float]

    def sensing_rate(self, kind: DeviceKind, sensor: FunctionType, speed: SamplingSpeed) -> float:
        try:
            return self.sensing[(kind, sensor, speed)]
        except KeyError:
            raise UnsupportedFunction(f"no sensing rate for {kind.label}/{sensor.label}/{speed.label}") from None

    def link(self, kind: DeviceKind, transport: NetworkKind) -> LinkCost:
        if not any(t == transport for (_, t) in self.links):
            raise UnknownTransport(f"catalog has no {NetworkKind.parse(transport).label} costs")
        try:
            return self.links[(kind, transport)]
        except KeyError:
            raise MissingEntry(f"no {transport.label} costs for {kind.label}") from None

    def processing_rate(self, kind: DeviceKind, function: FunctionType) -> float:
        try:
            return self.processing[(kind, function)]
        except KeyError:
            raise UnsupportedFunction(f"no processing rate for {kind.label}/{function.label}") from None

    def to_dict(self) -> dict:
        return {
            "sensing": [
                {"device": k.label, "sensor": s.label, "speed": sp.label, "mJ_per_s": v}
                for (k, s, sp), v in self.sensing.items()
            ],
            "connectivity": [
                {"device": k.label, "transport": t.label, "per_byte_mJ": c.per_byte_mJ,
                 "high_idle_mJ": c.high_idle_mJ, "low_idle_mJ": c.low_idle_mJ}
                for (k, t), c in self.links.items()
            ],
            "processing": [
                {"device": k.label, "function": f.label, "per_byte_mJ": v}
                for (k, f), v in self.processing.items()
            ],
        }


def _table2_required():
    req = []
    for kind in (DeviceKind.PHONE, DeviceKind.WATCH):
        for sensor in (FunctionType.ACCELEROMETER, FunctionType.GYROSCOPE, FunctionType.MAGNETOMETER):
            for speed in SamplingSpeed:
                req.append(("sensing", (kind, sensor, speed)))
        for transport in (NetworkKind.BLUETOOTH, NetworkKind.WIFI):
            req.append(("links", (kind, transport)))
        for fn in (FunctionType.COMPRESSION, FunctionType.ENCODING):
            req.append(("processing", (kind, fn)))
    return tuple(req)


#: Entries every catalog must provide (the measured phone/watch table).
TABLE2_REQUIRED = _table2_required()


def default_catalog_path() -> Path:
    return Path(str(resources.files("panalloc") / "data" / "energy_catalog.json"))


def _rate(entry: dict, key: str) -> float:
    value = entry[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
        raise ParseError(f"{key} must be a finite non-negative number, got {value!r}")
    return float(value)


def catalog_from_dict(data, required=TABLE2_REQUIRED, base: Optional[EnergyCatalog] = None) -> EnergyCatalog:
    """Build a catalog from the JSON document structure.

    With ``base`` given, entries in ``data`` extend or override it.
    """
    if not isinstance(data, dict) or not data:
        raise ParseError("catalog must be a non-empty JSON object")
    unknown = set(data) - {"sensing", "connectivity", "processing"}
    if unknown:
        raise ParseError(f"unknown catalog sections: {sorted(unknown)}")
    sensing = dict(base.sensing) if base else {}
    links = dict(base.links) if base else {}
    processing = dict(base.processing) if base else {}
    try:
        for e in data.get("sensing", []):
            key = (DeviceKind.parse(e["device"]), FunctionType.parse(e["sensor"]), SamplingSpeed.parse(e["speed"]))
            if key[1].category is not FunctionCategory.SENSING:
                raise ParseError(f"{key[1].label} is not a sensor")
            sensing[key] = _rate(e, "mJ_per_s")
        for e in data.get("connectivity", []):
            key = (DeviceKind.parse(e["device"]), NetworkKind.parse(e["transport"]))
            low = e.get("low_idle_mJ")
            links[key] = LinkCost(_rate(e, "per_byte_mJ"), _rate(e, "high_idle_mJ"),
                                  None if low is None else _rate(e, "low_idle_mJ"))
        for e in data.get("processing", []):
            key = (DeviceKind.parse(e["device"]), FunctionType.parse(e["function"]))
            if key[1].category is not FunctionCategory.PROCESSING:
                raise ParseError(f"{key[1].label} is not a processing function")
            processing[key] = _rate(e, "per_byte_mJ")
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed catalog entry: {exc}") from exc

    tables = {"sensing": sensing, "links": links, "processing": processing}
    missing = [key for section, key in required if key not in tables[section]]
    if missing:
        raise MissingEntry(f"catalog lacks {len(missing)} required entries, first: {missing[0]}")
    return EnergyCatalog(sensing, links, processing)


def load_energy_catalog(path=None, required=TABLE2_REQUIRED) -> EnergyCatalog:
    path = Path(path) if path is not None else default_catalog_path()
    text = path.read_text()
    if not text.strip():
        raise ParseError(f"{path} is empty")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return catalog_from_dict(data, required)


# ---------------------------------------------------------------------------
# energy arithmetic (all results in mJ)


def transfer_energy(catalog: EnergyCatalog, device_kind: DeviceKind, transport: NetworkKind, n_bytes: float) -> float:
    """Energy of one transfer: per-byte part plus the high and low power idle tails."""
    if n_bytes < 0:
        raise ValueError("n_bytes must be >= 0")
    cost = catalog.link(DeviceKind.parse(device_kind), NetworkKind.parse(transport))
    return cost.per_byte_mJ * n_bytes + cost.high_idle_mJ + (cost.low_idle_mJ or 0.0)


def implementation_energy(catalog, function_type, executing_device_kind, *, sampling_speed=SamplingSpeed.NORMAL,
                          report_interval_s=60.0, payload_bytes=0, uplink=NetworkKind.WIFI) -> float:
    """Energy the executing device spends per reporting interval running the function itself."""
    function_type = FunctionType.parse(function_type)
    category = function_type.category
    if category is FunctionCategory.SENSING:
        return catalog.sensing_rate(executing_device_kind, function_type, sampling_speed) * report_interval_s
    if category is FunctionCategory.PROCESSING:
        return catalog.processing_rate(executing_device_kind, function_type) * payload_bytes
    try:
        return transfer_energy(catalog, executing_device_kind, uplink, payload_bytes)
    except (UnknownTransport, MissingEntry) as exc:
        raise UnsupportedFunction(str(exc)) from exc


def delivery_energy(catalog, executing_device_kind, payload_bytes, remote: bool) -> float:
    """Bluetooth cost of shipping one report to the requesting device; local delivery is free."""
    if not remote:
        return 0.0
    return transfer_energy(catalog, executing_device_kind, NetworkKind.BLUETOOTH, payload_bytes)


def function_energy_per_interval(catalog: EnergyCatalog, registration: Registration,
                                 executing_device_kind: DeviceKind, executing_device_id: int,
                                 uplink: NetworkKind = NetworkKind.WIFI) -> float:
    kind = DeviceKind.parse(executing_device_kind)
    impl = implementation_energy(
        catalog, registration.function_type, kind,
        sampling_speed=registration.sampling_speed,
        report_interval_s=registration.report_interval_s,
        payload_bytes=registration.payload_bytes_per_report,
        uplink=uplink,
    )
    remote = executing_device_id != registration.origin_device
    return impl + delivery_energy(catalog, kind, registration.payload_bytes_per_report, remote)


def function_power(catalog, registration, executing_device_kind, executing_device_id, uplink=NetworkKind.WIFI) -> float:
    """Average power in mW (= mJ/s) of serving ``registration`` on the given device."""
    energy = function_energy_per_interval(catalog, registration, executing_device_kind, executing_device_id, uplink)
    return energy / registration.report_interval_s


# ---------------------------------------------------------------------------
# preferences and mappability

CONNECTIVITY_VALUES = {0: None, 1: NetworkKind.WIFI, 2: NetworkKind.CELLULAR}


def _connectivity_ok(value, reg, ctx):
    if reg.function_type.category is not FunctionCategory.CONNECTIVITY:
        return True
    if ctx is None or ctx.connected_network is None:
        return False
    if isinstance(value, str):
        value = {"any": 0, "wifi": 1, "cellular": 2}.get(_norm(value), value)
    if value not in CONNECTIVITY_VALUES:
        raise UnknownReference(f"unknown connectivity preference value {value!r}")
    wanted = CONNECTIVITY_VALUES[value]
    return wanted is None or ctx.connected_network[0] == wanted


def _min_soc_ok(value, reg, ctx):
    return ctx is not None and ctx.battery_soc_percent >= float(value)


def _charging_ok(value, reg, ctx):
    return ctx is not None and ctx.charging == bool(value)


def _activity_ok(value, reg, ctx):
    return ctx is not None and ctx.moving == Activity.parse(value)


def _exclude_ok(value, reg, ctx, device_id=None):
    return device_id != int(value)


RULE_CHECKS = {
    "connectivity": _connectivity_ok,
    "min_soc": _min_soc_ok,
    "charging": _charging_ok,
    "activity": _activity_ok,
    "exclude_device": None,  # handled with the device id in hand
}


@dataclass(frozen=True)
class MappabilityMatrix:
    registrations: tuple[Registration, ...]
    device_ids: tuple[int, ...]
    matrix: np.ndarray = field(compare=False)
    infeasible: tuple[int, ...] = ()

    def row(self, i: int) -> list[int]:
        return [int(v) for v in self.matrix[i]]

    def get(self, registration_index: int, device_id: int) -> bool:
        return bool(self.matrix[registration_index, self.device_ids.index(device_id)])

    def feasible(self) -> list[int]:
        return [i for i in range(len(self.registrations)) if i not in self.infeasible]


def user_activity(contexts: Mapping[int, ContextSnapshot]) -> Activity:
    """The PAN user's activity: the first non-Still activity any device reports."""
    for device_id in sorted(contexts):
        if contexts[device_id].moving is not Activity.STILL:
            return contexts[device_id].moving
    return Activity.STILL


def _effective_rules(reg, device_id, preferences):
    applicable = []
    for pref in preferences:
        if pref.scope is Scope.DEVICE and pref.subject == device_id:
            applicable.append(pref)
        elif pref.scope is Scope.USER and pref.subject in (reg.app_id, "*"):
            applicable.append(pref)
        elif pref.scope is Scope.APPLICATION and pref.subject == reg.app_id:
            applicable.append(pref)
    rules = {}
    # lowest priority first so higher scopes overwrite per context name
    for pref in sorted(applicable, key=lambda p: -int(p.scope)):
        for name, value in pref.rules:
            rules[name] = value
    return rules


def apply_preferences(registrations: Sequence[Registration], preferences: Sequence[Preference],
                      contexts: Mapping[int, ContextSnapshot], devices: Sequence[DeviceProfile],
                      known_apps: Optional[Iterable[str]] = None) -> MappabilityMatrix:
    """Compute m[r, d] for every registration and device.

    A device is mappable when it implements the function, no effective
    preference rule forbids it, and no matching forced mapping pins the
    request elsewhere. Rows that end up all-zero are listed in ``infeasible``.
    """
    device_ids = tuple(d.device_id for d in devices)
    known_devices = set(device_ids)
    apps = set(known_apps) if known_apps is not None else {r.app_id for r in registrations}
    for pref in preferences:
        if pref.scope is Scope.DEVICE and pref.subject not in known_devices:
            raise UnknownReference(f"device preference for unknown device {pref.subject!r}")
        if pref.scope is not Scope.DEVICE and pref.subject != "*" and pref.subject not in apps:
            raise UnknownReference(f"preference for unknown app {pref.subject!r}")
        for name, value in pref.rules:
            if name not in RULE_CHECKS:
                raise UnknownReference(f"unknown context name {name!r}")
            if name == "exclude_device" and int(value) not in known_devices:
                raise UnknownReference(f"exclude_device references unknown device {value!r}")
    for reg in registrations:
        for _, dev in reg.forced_mapping:
            if dev not in known_devices:
                raise UnknownReference(f"forced mapping to unknown device {dev!r}")

    activity = user_activity(contexts)
    m = np.zeros((len(registrations), len(devices)), dtype=bool)
    for i, reg in enumerate(registrations):
        for j, dev in enumerate(devices):
            if not dev.implements(reg.function_type):
                continue
            ctx = contexts.get(dev.device_id)
            ok = True
            for name, value in _effective_rules(reg, dev.device_id, preferences).items():
                if name == "exclude_device":
                    ok = _exclude_ok(value, reg, ctx, dev.device_id)
                else:
                    ok = RULE_CHECKS[name](value, reg, ctx)
                if not ok:
                    break
            if ok and reg.function_type.category is FunctionCategory.CONNECTIVITY:
                ok = ctx is not None and ctx.connected_network is not None
            m[i, j] = ok
        for ctx_name, pinned in reg.forced_mapping:
            if _norm(ctx_name) != _norm(activity.name):
                continue
            j = device_ids.index(pinned)
            if m[i, j]:
                m[i] = False
                m[i, j] = True
                break
    infeasible = tuple(i for i in range(len(registrations)) if not m[i].any())
    return MappabilityMatrix(tuple(registrations), device_ids, m, infeasible)


# ---------------------------------------------------------------------------
# request aggregation


@dataclass(frozen=True)
class AggregatedRequest:
    function_type: FunctionType
    origin_device: int
    sampling_speed: SamplingSpeed
    report_interval_s: float
    payload_bytes_per_report: int
    members: tuple[Registration, ...]

    @property
    def key(self) -> str:
        return f"{self.origin_device}:{self.function_type.label}"

    def as_registration(self) -> Registration:
        forced = []
        for member in self.members:
            forced.extend(p for p in member.forced_mapping if p not in forced)
        return Registration(
            app_id="+".join(sorted({m.app_id for m in self.members})),
            function_type=self.function_type,
            origin_device=self.origin_device,
            sampling_speed=self.sampling_speed,
            report_interval_s=self.report_interval_s,
            payload_bytes_per_report=self.payload_bytes_per_report,
            forced_mapping=tuple(forced),
        )


def aggregate_requests(registrations: Iterable[Registration]) -> list[AggregatedRequest]:
    """Merge registrations for the same function made on the same device.

    The merged request samples at the fastest requested speed and reports at
    the shortest interval. Sensing streams are shared, so the merged byte rate
    is the largest member rate; connectivity and processing carry per-app data,
    so their byte rates add up.
    """
    groups: dict[tuple[int, FunctionType], list[Registration]] = {}
    for reg in registrations:
        groups.setdefault((reg.origin_device, reg.function_type), []).append(reg)
    out = []
    for (origin, ftype), members in groups.items():
        interval = min(m.report_interval_s for m in members)
        rates = [m.payload_bytes_per_report / m.report_interval_s for m in members]
        rate = max(rates) if ftype.category is FunctionCategory.SENSING else sum(rates)
        payload = members[0].payload_bytes_per_report if len(members) == 1 else math.ceil(rate * interval - 1e-9)
        out.append(AggregatedRequest(
            function_type=ftype,
            origin_device=origin,
            sampling_speed=max(m.sampling_speed for m in members),
            report_interval_s=interval,
            payload_bytes_per_report=payload,
            members=tuple(members),
        ))
    return out

