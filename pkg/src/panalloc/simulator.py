"""Deterministic event-driven simulation of a personal-area network.

Time is kept in integer milliseconds. Between events every battery drains
linearly (baseline power plus the power of the functions it runs), so no
numerical integration is involved: the loop jumps from one event to the next
and predicts threshold crossings and battery depletion analytically.
"""
from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import allocator, protocol
from .core import (
    Activity, ContextSnapshot, DeviceKind, DeviceProfile, EnergyCatalog, FunctionCategory,
    FunctionImplementation, FunctionType, NetworkKind, NetworkProfile, Objective, ObjectiveMode, Preference,
    Registration, SamplingSpeed, Scope, Tier, aggregate_requests, apply_preferences, catalog_from_dict,
    load_energy_catalog, transfer_energy,
)
from .errors import InvalidScenario, MissingEntry, PanError, UnknownTransport

MB = 1_000_000


# ---------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class SimDevice:
    profile: DeviceProfile
    initial_soc_percent: float = 100.0
    full_battery_hours: Optional[float] = None
    present: bool = True
    activity: Activity = Activity.STILL
    charging: bool = False
    charge_mW: float = 0.0
    network: Optional[tuple[NetworkKind, bytes]] = None


@dataclass(frozen=True)
class TimedRegistration:
    registration: Registration
    start_s: float = 0.0
    stop_s: Optional[float] = None


@dataclass(frozen=True)
class QualityRule:
    function_type: FunctionType
    activity: Optional[Activity]  # None matches any activity
    prefer: tuple[int, ...]


@dataclass(frozen=True)
class ScriptEvent:
    t_s: float
    device: int
    changes: dict


@dataclass(frozen=True)
class Scenario:
    name: str
    devices: tuple[SimDevice, ...]
    registrations: tuple[TimedRegistration, ...] = ()
    objective: Objective = Objective()
    context_script: tuple[ScriptEvent, ...] = ()
    preferences: tuple[Preference, ...] = ()
    quality_rules: tuple[QualityRule, ...] = ()
    soc_threshold_percent: float = 20.0
    debounce_s: float = 10.0
    horizon_s: float = 86400.0
    rng_seed: int = 0
    strategy: str = "afv"  # afv | static | all
    static_device: Optional[int] = None
    master_rule: str = "max_ratio"
    include_message_energy: bool = True
    batch_window_s: float = 0.0
    sample_interval_s: float = 60.0
    catalog: Optional[EnergyCatalog] = field(default=None, compare=False)

    def __post_init__(self):
        ids = [d.profile.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise InvalidScenario("device ids must be unique")
        if not 0 < self.soc_threshold_percent < 100:
            raise InvalidScenario("soc_threshold_percent must be within (0, 100)")
        if self.horizon_s <= 0:
            raise InvalidScenario("horizon must be positive")
        times = [e.t_s for e in self.context_script]
        if times != sorted(times):
            raise InvalidScenario("context script events must be in time order")
        if self.strategy not in ("afv", "static", "all"):
            raise InvalidScenario(f"unknown strategy {self.strategy!r}")
        if self.strategy == "static" and self.static_device not in ids:
            raise InvalidScenario("static strategy needs a known static_device")
        for d in self.devices:
            if not 0 <= d.initial_soc_percent <= 100:
                raise InvalidScenario("initial SoC must be within 0..100")
            if d.profile.tier is Tier.TIER2 and d.profile.paired_host not in ids:
                raise InvalidScenario(f"device {d.profile.device_id} is paired to an unknown host")
        for tr in self.registrations:
            if tr.registration.origin_device not in ids:
                raise InvalidScenario(f"registration from unknown device {tr.registration.origin_device}")
        for e in self.context_script:
            if e.device not in ids:
                raise InvalidScenario(f"script event for unknown device {e.device}")

    def device(self, device_id: int) -> SimDevice:
        for d in self.devices:
            if d.profile.device_id == device_id:
                return d
        raise KeyError(device_id)

    def with_changes(self, **kw) -> "Scenario":
        from dataclasses import replace
        return replace(self, **kw)

    def with_device(self, device_id: int, **kw) -> "Scenario":
        from dataclasses import replace
        devices = tuple(replace(d, **kw) if d.profile.device_id == device_id else d for d in self.devices)
        return replace(self, devices=devices)


def _network_from_json(d) -> NetworkProfile:
    return NetworkProfile(NetworkKind.parse(d["kind"]), str(d.get("id", "")).encode(),
                          float(d.get("monetary_cost_per_MB", 0.0)), float(d.get("link_speed_Bps", 0.0)))


def _connected(d) -> Optional[tuple[NetworkKind, bytes]]:
    if d is None:
        return None
    return NetworkKind.parse(d["kind"]), str(d.get("id", "")).encode()


def scenario_from_dict(data: dict, base_dir: Optional[Path] = None, catalog: Optional[EnergyCatalog] = None) -> Scenario:
    """Parse the scenario JSON document (see README for the schema)."""
    try:
        devices = []
        for d in data["devices"]:
            kind = DeviceKind.parse(d["kind"])
            tier = Tier.parse(d.get("tier", "Tier2" if kind is DeviceKind.TIER2_SENSOR else "Tier1"))
            impls = tuple(FunctionImplementation(FunctionType.parse(f)) for f in d.get("functions", []))
            profile = DeviceProfile(
                device_id=int(d["id"]), device_kind=kind, tier=tier,
                battery_capacity_mAh=float(d.get("battery_capacity_mAh", 0.0)),
                networks=tuple(_network_from_json(n) for n in d.get("networks", [])),
                implementations=impls, paired_host=d.get("paired_host"),
                voltage_V=float(d.get("voltage_V", 3.8)),
            )
            devices.append(SimDevice(
                profile=profile,
                initial_soc_percent=float(d.get("initial_soc_percent", 100.0)),
                full_battery_hours=d.get("full_battery_hours"),
                present=bool(d.get("present", True)),
                activity=Activity.parse(d.get("activity", "Still")),
                charging=bool(d.get("charging", False)),
                charge_mW=float(d.get("charge_mW", 0.0)),
                network=_connected(d.get("connected")),
            ))
        regs = []
        for r in data.get("registrations", []):
            reg = Registration(
                app_id=str(r["app_id"]), function_type=FunctionType.parse(r["function"]),
                origin_device=int(r["origin"]),
                sampling_speed=SamplingSpeed.parse(r.get("speed", "NORMAL")),
                report_interval_s=float(r.get("report_interval_s", 60.0)),
                payload_bytes_per_report=int(r.get("payload_bytes", 0)),
                precision_spec=tuple((c, (float(lo), float(hi))) for c, (lo, hi) in r.get("precision", [])),
                forced_mapping=tuple((str(c), int(dev)) for c, dev in r.get("forced_mapping", [])),
            )
            regs.append(TimedRegistration(reg, float(r.get("start_s", 0.0)),
                                          None if r.get("stop_s") is None else float(r["stop_s"])))
        prefs = tuple(Preference(Scope.parse(p["scope"]), p["subject"], tuple((k, v) for k, v in p["rules"]))
                      for p in data.get("preferences", []))
        rules = tuple(QualityRule(FunctionType.parse(q["function"]),
                                  None if q.get("activity", "*") == "*" else Activity.parse(q["activity"]),
                                  tuple(int(x) for x in q["prefer"]))
                      for q in data.get("quality_rules", []))
        script = tuple(ScriptEvent(float(e["t_s"]), int(e["device"]), {k: v for k, v in e.items()
                                                                       if k not in ("t_s", "device")})
                       for e in data.get("context_script", []))
        if catalog is None:
            path = data.get("catalog")
            if path is not None and base_dir is not None and not Path(path).is_absolute():
                path = Path(base_dir) / path
            catalog = load_energy_catalog(path)
        if data.get("catalog_extra"):
            catalog = catalog_from_dict(data["catalog_extra"], required=(), base=catalog)
        return Scenario(
            name=str(data.get("name", "scenario")),
            devices=tuple(devices),
            registrations=tuple(regs),
            objective=Objective(ObjectiveMode.parse(data.get("objective", "Energy"))),
            context_script=script,
            preferences=prefs,
            quality_rules=rules,
            soc_threshold_percent=float(data.get("soc_threshold_percent", 20.0)),
            debounce_s=float(data.get("debounce_s", 10.0)),
            horizon_s=float(data.get("horizon_s", 86400.0)),
            rng_seed=int(data.get("rng_seed", 0)),
            strategy=str(data.get("strategy", "afv")),
            static_device=data.get("static_device"),
            master_rule=str(data.get("master_rule", "max_ratio")),
            include_message_energy=bool(data.get("include_message_energy", True)),
            batch_window_s=float(data.get("batch_window_s", 0.0)),
            sample_interval_s=float(data.get("sample_interval_s", 60.0)),
            catalog=catalog,
        )
    except InvalidScenario:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidScenario(f"malformed scenario: {exc}") from exc


def load_scenario(path, catalog: Optional[EnergyCatalog] = None) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidScenario(f"{path}: {exc}") from exc
    return scenario_from_dict(data, base_dir=path.parent, catalog=catalog)


# ---------------------------------------------------------------------------
# context monitoring


@dataclass(frozen=True)
class RawContext:
    soc_percent: int
    charging: bool = False
    activity: Activity = Activity.STILL
    network: Optional[tuple[NetworkKind, bytes]] = None


@dataclass(frozen=True)
class ContextChange:
    device_id: int
    name: str
    old: object
    new: object
    t_s: float


@dataclass
class MonitorState:
    """What one device's context monitor last reported, plus a debounce slot."""

    device_id: int
    threshold_percent: float = 20.0
    debounce_s: float = 10.0
    soc_percent: int = 100
    low: bool = False
    charging: bool = False
    activity: Activity = Activity.STILL
    network: Optional[tuple[NetworkKind, bytes]] = None
    pending_activity: Optional[Activity] = None
    pending_since: float = 0.0

    def pending_deadline(self) -> Optional[float]:
        if self.pending_activity is None:
            return None
        return self.pending_since + self.debounce_s

    def snapshot(self, avg_link_speed: float = 0.0) -> ContextSnapshot:
        return ContextSnapshot(self.device_id, max(0, min(100, self.soc_percent)), self.charging,
                               self.activity, self.network, avg_link_speed)


def context_monitor_step(state: MonitorState, t: float, raw: RawContext) -> list[ContextChange]:
    """Update ``state`` with raw readings at time ``t`` (s); return reportable changes.

    Battery changes are reported only when the SoC crosses the threshold;
    activity changes only after the new activity has persisted for the
    debounce period.
    """
    changes = []
    low = raw.soc_percent <= state.threshold_percent
    if low != state.low:
        changes.append(ContextChange(state.device_id, "battery", state.soc_percent, raw.soc_percent, t))
        state.low = low
    state.soc_percent = raw.soc_percent
    if raw.charging != state.charging:
        changes.append(ContextChange(state.device_id, "charging", state.charging, raw.charging, t))
        state.charging = raw.charging
    if raw.network != state.network:
        changes.append(ContextChange(state.device_id, "network", state.network, raw.network, t))
        state.network = raw.network
    if raw.activity == state.activity:
        state.pending_activity = None
    else:
        if state.pending_activity != raw.activity:
            state.pending_activity, state.pending_since = raw.activity, t
        if t - state.pending_since >= state.debounce_s - 1e-9:
            changes.append(ContextChange(state.device_id, "activity", state.activity, raw.activity, t))
            state.activity = raw.activity
            state.pending_activity = None
    return changes


# ---------------------------------------------------------------------------
# runtime state and trace


@dataclass
class DeviceState:
    spec: SimDevice
    capacity_mJ: float
    energy_mJ: float
    baseline_mW: float
    present: bool
    alive: bool = True
    activity: Activity = Activity.STILL
    charging: bool = False
    charge_mW: float = 0.0
    network: Optional[tuple[NetworkKind, bytes]] = None
    net_cost: dict = field(default_factory=dict)
    net_speed: dict = field(default_factory=dict)
    function_mW: float = 0.0
    monitor: Optional[MonitorState] = None
    death_s: Optional[float] = None
    # energy ledger, mJ
    used_baseline: float = 0.0
    used_function: float = 0.0
    used_message: float = 0.0
    used_init: float = 0.0
    charged_in: float = 0.0

    @property
    def id(self) -> int:
        return self.spec.profile.device_id

    @property
    def kind(self) -> DeviceKind:
        return self.spec.profile.device_kind

    @property
    def tier1(self) -> bool:
        return self.spec.profile.tier is Tier.TIER1

    def soc_percent(self) -> float:
        return 100.0 * self.energy_mJ / self.capacity_mJ if self.capacity_mJ else 0.0

    def soc_int(self) -> int:
        return max(0, min(100, math.floor(self.soc_percent() + 1e-9)))

    def net_power(self) -> float:
        """mW leaving the battery (negative while charging faster than it drains)."""
        return self.baseline_mW + self.function_mW - (self.charge_mW if self.charging else 0.0)


@dataclass
class Trace:
    scenario: str
    horizon_s: float
    soc_series: list = field(default_factory=list)  # (t_s, device_id, soc_percent)
    events: list = field(default_factory=list)
    uptime_s: dict = field(default_factory=dict)
    tier1: tuple = ()
    energy: dict = field(default_factory=dict)

    @property
    def system_uptime_s(self) -> float:
        return min(self.uptime_s[d] for d in self.tier1)

    def allocations(self) -> list[dict]:
        return [e for e in self.events if e["type"] == "allocation"]

    def executors(self, function_label: str) -> list[tuple[float, list]]:
        """(time, executing devices) each time ``function_label`` was (re)placed."""
        out = []
        for e in self.events:
            if e["type"] in ("allocation", "placement"):
                devs = e["placement"].get(function_label)
                if devs is not None:
                    out.append((e["t_s"], devs))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "device_id", "soc_percent"])
            for t, d, soc in self.soc_series:
                w.writerow([f"{t:.3f}", d, f"{soc:.6f}"])

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "horizon_s": self.horizon_s,
            "uptime_s": {str(k): v for k, v in self.uptime_s.items()},
            "system_uptime_s": self.system_uptime_s,
            "energy_mJ": {str(k): v for k, v in self.energy.items()},
            "events": self.events,
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, bytes):
        return o.decode(errors="replace")
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# the simulation


class Simulation:
    """One run of a scenario; use :func:`run` unless stepping is needed."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.catalog = scenario.catalog if scenario.catalog is not None else load_energy_catalog()
        self.t_ms = 0
        self.trace = Trace(scenario.name, scenario.horizon_s)
        self.devices: dict[int, DeviceState] = {}
        for d in scenario.devices:
            p = d.profile
            cap = p.capacity_mJ
            baseline = cap / (d.full_battery_hours * 3600.0) if d.full_battery_hours else 0.0
            st = DeviceState(
                spec=d, capacity_mJ=cap, energy_mJ=cap * d.initial_soc_percent / 100.0, baseline_mW=baseline,
                present=d.present, activity=d.activity, charging=d.charging, charge_mW=d.charge_mW,
                network=d.network,
                net_cost={(n.network_kind, n.network_id): n.monetary_cost_per_MB for n in p.networks},
                net_speed={(n.network_kind, n.network_id): n.link_speed_Bps for n in p.networks},
            )
            if st.tier1:
                st.monitor = MonitorState(p.device_id, scenario.soc_threshold_percent, scenario.debounce_s,
                                          st.soc_int(), st.soc_int() <= scenario.soc_threshold_percent,
                                          st.charging, st.activity, st.network)
            self.devices[p.device_id] = st
        self.initial = {i: s.energy_mJ for i, s in self.devices.items()}
        self.master: Optional[int] = None
        self.device_index: dict[int, int] = {}
        self.request_index: dict[str, int] = {}
        self.placement: dict = {}  # function label -> {request key: executor}
        self.powers: dict[int, dict] = {}
        self.timers: list = []
        self._seq = 0
        self._pending_realloc_ms: Optional[int] = None
        self._pending_reasons: list = []
        self._script = list(scenario.context_script)
        self._script_pos = 0
        self._next_sample_ms = 0
        self._active_keys: set = set()
        self.rng = np.random.default_rng(scenario.rng_seed)

    # -- helpers ----------------------------------------------------------
    @property
    def t_s(self) -> float:
        return self.t_ms / 1000.0

    def log(self, event_type: str, **data):
        self.trace.events.append({"t_s": self.t_s, "type": event_type, **data})

    def tier1_alive(self) -> list[DeviceState]:
        return [s for s in self.devices.values() if s.tier1 and s.alive and s.present]

    def available(self) -> list[DeviceState]:
        """Devices that can currently execute functions."""
        out = []
        for s in self.devices.values():
            if not s.present:
                continue
            if s.tier1:
                if s.alive:
                    out.append(s)
            else:
                host = self.devices[s.spec.profile.paired_host]
                if host.alive and host.present:
                    out.append(s)
        return out

    def _schedule(self, t_ms: int, kind: str, payload=None):
        self._seq += 1
        heapq.heappush(self.timers, (t_ms, self._seq, kind, payload))

    # -- energy -----------------------------------------------------------
    def _advance(self, t_ms: int):
        dt = (t_ms - self.t_ms) / 1000.0
        if dt < 0:
            raise RuntimeError("time went backwards")
        if dt > 0:
            for s in self.devices.values():
                if not s.alive or not s.present or not s.tier1:
                    continue
                use_b = s.baseline_mW * dt
                use_f = s.function_mW * dt
                gain = s.charge_mW * dt if s.charging else 0.0
                new = s.energy_mJ - use_b - use_f + gain
                if new > s.capacity_mJ:
                    gain -= new - s.capacity_mJ
                    new = s.capacity_mJ
                if new < 0:
                    avail = s.energy_mJ + gain
                    scale = avail / (use_b + use_f)
                    use_b *= scale
                    use_f = avail - use_b
                    new = 0.0
                s.energy_mJ = new
                s.used_baseline += use_b
                s.used_function += use_f
                s.charged_in += gain
        self.t_ms = t_ms

    def _charge(self, s: DeviceState, mJ: float, bucket: str):
        if not s.tier1 or not s.alive:
            return
        taken = min(mJ, s.energy_mJ)
        s.energy_mJ -= taken
        setattr(s, bucket, getattr(s, bucket) + taken)

    def _predict(self, s: DeviceState) -> Optional[int]:
        """Next ms at which the battery crosses the threshold level, empties or fills."""
        if not s.tier1 or not s.alive or not s.present:
            return None
        p = s.net_power()
        thr_level = (self.sc.soc_threshold_percent + 1) / 100.0 * s.capacity_mJ
        out = []
        if p > 0:
            out.append(math.ceil(s.energy_mJ / p * 1000.0))
            if s.energy_mJ >= thr_level:
                out.append(math.floor((s.energy_mJ - thr_level) / p * 1000.0) + 1)
        elif p < 0:
            if s.energy_mJ < s.capacity_mJ:
                out.append(math.ceil((s.capacity_mJ - s.energy_mJ) / -p * 1000.0))
            if s.energy_mJ < thr_level:
                out.append(math.floor((thr_level - s.energy_mJ) / -p * 1000.0) + 1)
        if not out:
            return None
        return self.t_ms + max(1, min(out))

    # -- messaging ----------------------------------------------------------
    def _send(self, sender: int, receiver: int, msg, purpose: str):
        size = protocol.wire_size(msg)
        s, r = self.devices[sender], self.devices[receiver]
        e_s = transfer_energy(self.catalog, s.kind, NetworkKind.BLUETOOTH, size)
        e_r = transfer_energy(self.catalog, r.kind, NetworkKind.BLUETOOTH, size)
        if self.sc.include_message_energy:
            self._charge(s, e_s, "used_message")
            self._charge(r, e_r, "used_message")
        self.log("message", kind=type(msg).__name__, purpose=purpose, sender=sender, receiver=receiver,
                 wire_size=size, energy_mJ={str(sender): e_s, str(receiver): e_r})

    def _group_formation(self, reason: str):
        """Every present Tier-1 device announces itself; charges the calibrated overhead."""
        members = self.tier1_alive()
        for s in members:
            if s.id not in self.device_index:
                self.device_index[s.id] = len(self.device_index)
            for t2 in self.devices.values():
                if not t2.tier1 and t2.spec.profile.paired_host == s.id and t2.id not in self.device_index:
                    self.device_index[t2.id] = len(self.device_index)
        n = len(members)
        msgs = {s.id: self._init_msg(s) for s in members}
        if n < 2:
            self.log("init", reason=reason, n=n, overhead_mJ=0.0, wire_sizes={})
            return
        total = 600.0 * (n - 1) + 1800.0  # mJ
        share = total / n
        for s in members:
            self._charge(s, share, "used_init")
        self.log("init", reason=reason, n=n, overhead_mJ=total,
                 wire_sizes={str(i): protocol.wire_size(m) for i, m in msgs.items()})

    def _init_msg(self, s: DeviceState) -> protocol.InitializationMsg:
        p = s.spec.profile
        nets = tuple(protocol.NetworkEntry(n.network_id, protocol.f32(s.net_cost[(n.network_kind, n.network_id)]))
                     for n in p.networks)
        funcs = []
        for impl in p.implementations:
            try:
                e = self._impl_power(s, impl.function_type, SamplingSpeed.NORMAL, 60.0, 0)
            except PanError:
                e = 0.0
            funcs.append(protocol.FunctionEntry(int(impl.function_type), protocol.f32(e)))
        return protocol.InitializationMsg(p.device_id, int(p.device_kind), nets, tuple(funcs))

    def _elect(self, reason: str):
        cands = [(s.id, s.soc_int(), s.baseline_mW + s.function_mW) for s in self.tier1_alive()]
        if not cands:
            self.master = None
            return
        self.master = allocator.select_master(sorted(cands), lowest_ratio=self.sc.master_rule == "lowest_ratio")
        self.log("master", device=self.master, reason=reason)

    # -- costs --------------------------------------------------------------
    def _uplink(self, s: DeviceState) -> NetworkKind:
        if s.network is not None:
            try:
                self.catalog.link(s.kind, s.network[0])
                return s.network[0]
            except (UnknownTransport, MissingEntry):
                pass
        return NetworkKind.WIFI

    def _impl_power(self, s: DeviceState, ftype: FunctionType, speed, interval, payload) -> float:
        """mW the device itself spends executing the function for one request."""
        if ftype.category is FunctionCategory.SENSING:
            return self.catalog.sensing_rate(s.kind, ftype, speed)
        if ftype.category is FunctionCategory.PROCESSING:
            return self.catalog.processing_rate(s.kind, ftype) * payload / interval
        return transfer_energy(self.catalog, s.kind, self._uplink(s), payload) / interval

    def _bt_power(self, s: DeviceState, payload, interval) -> float:
        return transfer_energy(self.catalog, s.kind, NetworkKind.BLUETOOTH, payload) / interval

    def _energy_costs(self, ftype, reqs, devs):
        """Opening and service costs in mW, plus who pays what once placed."""
        f = np.zeros(len(devs))
        c = np.zeros((len(reqs), len(devs)))
        for j, s in enumerate(devs):
            host = s if s.tier1 else self.devices[s.spec.profile.paired_host]
            if ftype.category is FunctionCategory.SENSING:
                if s.tier1:
                    f[j] = self._impl_power(s, ftype, max(r.sampling_speed for r in reqs), 1.0, 0)
                else:
                    # remote sensor: the host pulls one report per interval
                    f[j] = max(self._bt_power(host, r.payload_bytes_per_report, r.report_interval_s) for r in reqs)
            for i, r in enumerate(reqs):
                if ftype.category is not FunctionCategory.SENSING:
                    c[i, j] = self._impl_power(s, ftype, r.sampling_speed, r.report_interval_s,
                                               r.payload_bytes_per_report)
                if r.origin_device != host.id:
                    c[i, j] += self._bt_power(host, r.payload_bytes_per_report, r.report_interval_s)
        return f, c

    def _monetary_costs(self, ftype, reqs, devs):
        if ftype.category is not FunctionCategory.CONNECTIVITY:
            return self._energy_costs(ftype, reqs, devs)
        f = np.zeros(len(devs))
        c = np.zeros((len(reqs), len(devs)))
        for j, s in enumerate(devs):
            price = s.net_cost.get(s.network, 0.0) if s.network is not None else 0.0
            for i, r in enumerate(reqs):
                c[i, j] = r.payload_bytes_per_report / MB * price / r.report_interval_s
        return f, c

    def _quality_costs(self, ftype, reqs, devs, mappable_cols, activity):
        preferred = None
        for rule in self.sc.quality_rules:
            if rule.function_type == ftype and (rule.activity is None or rule.activity == activity):
                for dev_id in rule.prefer:
                    if dev_id in mappable_cols:
                        preferred = dev_id
                        break
                if preferred is not None:
                    break
        if preferred is None and ftype.category is FunctionCategory.CONNECTIVITY:
            speeds = {s.id: s.net_speed.get(s.network, 0.0) for s in devs if s.id in mappable_cols and s.network}
            if speeds:
                preferred = max(sorted(speeds), key=lambda k: speeds[k])
        if preferred is None:
            return self._energy_costs(ftype, reqs, devs)
        f = np.array([0.0 if s.id == preferred else 1.0 for s in devs])
        c = np.array([[0.0 if r.origin_device == s.id else 1e-3 for s in devs] for r in reqs])
        return f, c

    # -- allocation -----------------------------------------------------------
    def _active_registrations(self) -> list[Registration]:
        out = []
        for tr in self.sc.registrations:
            o = self.devices[tr.registration.origin_device]
            if tr.start_s * 1000 <= self.t_ms and (tr.stop_s is None or self.t_ms < tr.stop_s * 1000) \
                    and o.alive and o.present:
                out.append(tr.registration)
        return out

    def _contexts(self) -> dict[int, ContextSnapshot]:
        out = {}
        for s in self.available():
            if s.monitor is not None:
                out[s.id] = s.monitor.snapshot(s.net_speed.get(s.network, 0.0) if s.network else 0.0)
        return out

    def _reallocate(self, reasons):
        regs = self._active_registrations()
        aggs = aggregate_requests(regs)
        for a in aggs:
            if a.key not in self.request_index:
                self.request_index[a.key] = len(self.request_index)
        if self.sc.strategy != "afv":
            self._baseline_placement(aggs, reasons)
            return
        devs = self.available()
        contexts = self._contexts()
        apps = {tr.registration.app_id for tr in self.sc.registrations}
        members = [r for a in aggs for r in a.members]
        mm = apply_preferences(members, self.sc.preferences, contexts, [s.spec.profile for s in devs], apps)
        # an aggregate may only go where every member registration may go
        m = np.ones((len(aggs), len(devs)), dtype=bool)
        row = 0
        for i, a in enumerate(aggs):
            for _ in a.members:
                m[i] &= mm.matrix[row]
                row += 1
        mode = self.sc.objective.mode
        if mode is ObjectiveMode.ENERGY:
            low = np.array([s.tier1 and s.soc_int() <= self.sc.soc_threshold_percent for s in devs], dtype=bool)
            for i in range(len(aggs)):
                if (m[i] & ~low).any():
                    m[i] &= ~low
        activity = _user_activity(contexts)
        unserved = [aggs[i].key for i in range(len(aggs)) if not m[i].any()]
        by_type: dict[FunctionType, list[int]] = {}
        for i, a in enumerate(aggs):
            if m[i].any():
                by_type.setdefault(a.function_type, []).append(i)

        def build(ftype, idx):
            cols = [j for j, s in enumerate(devs) if s.spec.profile.implements(ftype)]
            sub = [devs[j] for j in cols]
            reqs = [aggs[i] for i in idx]
            if mode is ObjectiveMode.ENERGY:
                f, c = self._energy_costs(ftype, reqs, sub)
            elif mode is ObjectiveMode.MONETARY:
                f, c = self._monetary_costs(ftype, reqs, sub)
            else:
                ok = {devs[j].id for j in cols if m[idx, j].any()}
                f, c = self._quality_costs(ftype, reqs, sub, ok, activity)
            origins = tuple(next((k for k, s in enumerate(sub) if s.id == r.origin_device), None) for r in reqs)
            return allocator.FapInstance(tuple(r.key for r in reqs), tuple(s.id for s in sub), f, c,
                                         m[np.ix_(idx, cols)], origins)

        instances = {ft: build(ft, idx) for ft, idx in by_type.items()}
        result = allocator.allocate(instances, lambda k, inst: inst)
        placement = {}
        for ft, a in result.items():
            placement[ft.label] = {k: int(v) for k, v in a.mapping().items()}
        self.log("allocation", reasons=reasons, objective=mode.label, master=self.master,
                 unserved=unserved, placement={k: sorted(set(v.values())) for k, v in placement.items()},
                 mapping=placement,
                 instances={ft.label: inst.to_dict() for ft, inst in instances.items()},
                 assignments={ft.label: a.to_dict() | {"x": a.x.tolist(), "y": a.y.tolist()}
                              for ft, a in result.items()},
                 total_cost=allocator.total_cost(result))
        self._apply_placement(aggs, {k: v for p in placement.values() for k, v in p.items()})
        self._distribute(aggs, placement)

    def _baseline_placement(self, aggs, reasons):
        avail = {s.id: s for s in self.available()}
        mapping: dict[str, list[int]] = {}
        for a in aggs:
            if self.sc.strategy == "static":
                d = self.sc.static_device
                mapping[a.key] = [d] if d in avail and avail[d].spec.profile.implements(a.function_type) else []
            else:
                mapping[a.key] = [s.id for s in avail.values()
                                  if s.tier1 and s.spec.profile.implements(a.function_type)]
        per_fn = {}
        for a in aggs:
            per_fn.setdefault(a.function_type.label, set()).update(mapping[a.key])
        self.log("placement", strategy=self.sc.strategy, reasons=reasons,
                 placement={k: sorted(v) for k, v in per_fn.items()},
                 unserved=[k for k, v in mapping.items() if not v])
        self._apply_placement(aggs, mapping)

    def _apply_placement(self, aggs, mapping):
        """Recompute every device's function power from request -> executor(s)."""
        for s in self.devices.values():
            s.function_mW = 0.0
        by_key = {a.key: a for a in aggs}
        sensing_speed: dict[tuple[int, FunctionType], SamplingSpeed] = {}
        pulls: dict[tuple[int, FunctionType], float] = {}
        for key, execs in mapping.items():
            a = by_key[key]
            for d in (execs if isinstance(execs, list) else [execs]):
                s = self.devices[d]
                host = s if s.tier1 else self.devices[s.spec.profile.paired_host]
                if a.function_type.category is FunctionCategory.SENSING:
                    if s.tier1:
                        k = (d, a.function_type)
                        sensing_speed[k] = max(sensing_speed.get(k, a.sampling_speed), a.sampling_speed)
                    else:
                        k = (host.id, a.function_type)
                        pulls[k] = max(pulls.get(k, 0.0),
                                       self._bt_power(host, a.payload_bytes_per_report, a.report_interval_s))
                else:
                    s.function_mW += self._impl_power(s, a.function_type, a.sampling_speed, a.report_interval_s,
                                                      a.payload_bytes_per_report)
                if a.origin_device != host.id:
                    host.function_mW += self._bt_power(host, a.payload_bytes_per_report, a.report_interval_s)
        for (d, ft), speed in sensing_speed.items():
            self.devices[d].function_mW += self.catalog.sensing_rate(self.devices[d].kind, ft, speed)
        for (h, ft), p in pulls.items():
            self.devices[h].function_mW += p
        self.placement = mapping

    def _distribute(self, aggs, placement):
        if self.master is None:
            return
        flat = {k: v for p in placement.values() for k, v in p.items()}
        by_key = {a.key: a for a in aggs}
        for s in self.tier1_alive():
            if s.id == self.master:
                continue
            rd = tuple((self.request_index[k] & 0xFF, self._dev_idx(v)) for k, v in sorted(flat.items())
                       if by_key[k].origin_device == s.id)
            vd = tuple((int(by_key[k].function_type), self._dev_idx(by_key[k].origin_device))
                       for k, v in sorted(flat.items()) if v == s.id
                       or (not self.devices[v].tier1 and self.devices[v].spec.profile.paired_host == s.id))
            self._send(self.master, s.id, protocol.AssignmentsMsg(rd, vd), "assignments")

    def _dev_idx(self, device_id: int) -> int:
        if device_id not in self.device_index:
            self.device_index[device_id] = len(self.device_index)
        return self.device_index[device_id] & 0xFF

    # -- context handling --------------------------------------------------
    def _apply_script(self, ev: ScriptEvent) -> list:
        s = self.devices[ev.device]
        reasons = []
        for key, value in ev.changes.items():
            if key == "activity":
                s.activity = Activity.parse(value)
            elif key == "charging":
                s.charging = bool(value)
            elif key == "charge_mW":
                s.charge_mW = float(value)
            elif key == "network":
                s.network = _connected(value)
            elif key == "monetary_cost_per_MB":
                net = (NetworkKind.parse(value["kind"]), str(value.get("id", "")).encode())
                s.net_cost[net] = float(value["cost"])
                reasons.append({"device": s.id, "change": "monetary_cost", "network": value})
            elif key == "link_speed_Bps":
                net = (NetworkKind.parse(value["kind"]), str(value.get("id", "")).encode())
                s.net_speed[net] = float(value["speed"])
                reasons.append({"device": s.id, "change": "link_speed", "network": value})
            elif key == "join":
                if not s.present:
                    s.present = True
                    reasons.append({"device": s.id, "change": "join"})
                    self.log("join", device=s.id)
            elif key == "leave":
                if s.present:
                    s.present = False
                    reasons.append({"device": s.id, "change": "leave"})
                    self.log("leave", device=s.id)
            else:
                raise InvalidScenario(f"unknown script key {key!r}")
        for r in reasons:
            if r["change"] in ("monetary_cost", "link_speed") and s.tier1 and s.alive:
                self._report(s, protocol.ContextSensorMsg(s.id, s.soc_int(), int(s.charging),
                                                          int(s.monitor.activity), *self._net_fields(s)))
        return reasons

    def _net_fields(self, s: DeviceState):
        if s.network is None:
            return protocol.NO_NETWORK, b"", 0.0
        return int(s.network[0]), s.network[1], protocol.f32(s.net_speed.get(s.network, 0.0))

    def _report(self, s: DeviceState, msg):
        if self.master is not None and s.id != self.master and self.sc.strategy == "afv":
            self._send(s.id, self.master, msg, "context")

    def _monitor_all(self) -> list:
        reasons = []
        for s in self.devices.values():
            if s.monitor is None or not s.alive or not s.present:
                continue
            raw = RawContext(s.soc_int(), s.charging, s.activity, s.network)
            changes = context_monitor_step(s.monitor, self.t_s, raw)
            if changes:
                for ch in changes:
                    self.log("context", device=s.id, name=ch.name, old=_plain(ch.old), new=_plain(ch.new))
                reasons += [{"device": s.id, "change": ch.name} for ch in changes]
                self._report(s, protocol.ContextSensorMsg(s.id, s.soc_int(), int(s.charging),
                                                          int(s.monitor.activity), *self._net_fields(s)))
            deadline = s.monitor.pending_deadline()
            if deadline is not None:
                self._schedule(max(self.t_ms, math.ceil(deadline * 1000 - 1e-6)), "debounce", s.id)
        return reasons

    def _registration_changes(self) -> list:
        keys = {(tr.registration.app_id, tr.registration.function_type, tr.registration.origin_device)
                for tr in self.sc.registrations if tr.registration in self._active_registrations()}
        reasons = []
        for key in sorted(keys - self._active_keys, key=str):
            app, ft, origin = key
            reasons.append({"device": origin, "change": "registration", "app": app, "function": ft.label})
            s = self.devices[origin]
            if s.tier1:
                info = json.dumps({"app": app}).encode()
                self._report(s, protocol.ContextRequestMsg(int(ft), info))
        for key in sorted(self._active_keys - keys, key=str):
            reasons.append({"device": key[2], "change": "unregistration", "app": key[0], "function": key[1].label})
        self._active_keys = keys
        return reasons

    def _check_deaths(self) -> list:
        reasons = []
        for s in self.devices.values():
            if s.tier1 and s.alive and s.present and s.energy_mJ <= 1e-9:
                s.alive = False
                s.energy_mJ = max(0.0, s.energy_mJ)
                s.function_mW = 0.0
                s.death_s = self.t_s
                self.trace.soc_series.append((self.t_s, s.id, 0.0))
                self.log("death", device=s.id)
                reasons.append({"device": s.id, "change": "death"})
        return reasons

    # -- main loop ------------------------------------------------------------
    def _sample(self):
        for s in self.devices.values():
            if s.tier1 and s.alive:
                self.trace.soc_series.append((self.t_s, s.id, s.soc_percent()))

    def run(self) -> Trace:
        sc = self.sc
        horizon_ms = int(round(sc.horizon_s * 1000))
        sample_ms = max(1, int(round(sc.sample_interval_s * 1000)))
        for tr in sc.registrations:
            for t in (tr.start_s, tr.stop_s):
                if t is not None and 0 < t * 1000 <= horizon_ms:
                    self._schedule(int(round(t * 1000)), "registration")

        if sc.strategy == "afv":
            self._elect("bootstrap")
            self._group_formation("bootstrap")
        self._sample()
        self._next_sample_ms = sample_ms
        reasons = [{"change": "bootstrap"}] + self._registration_changes() + self._monitor_all()
        reasons += self._check_deaths()
        self._settle(reasons)

        while self.t_ms < horizon_ms and self.tier1_alive():
            candidates = [horizon_ms, self._next_sample_ms]
            if self._script_pos < len(self._script):
                candidates.append(int(round(self._script[self._script_pos].t_s * 1000)))
            if self.timers:
                candidates.append(self.timers[0][0])
            if self._pending_realloc_ms is not None:
                candidates.append(self._pending_realloc_ms)
            for s in self.devices.values():
                p = self._predict(s)
                if p is not None:
                    candidates.append(p)
            t_next = max(self.t_ms, min(candidates))
            self._advance(t_next)

            reasons = []
            while self._script_pos < len(self._script) and \
                    int(round(self._script[self._script_pos].t_s * 1000)) <= self.t_ms:
                reasons += self._apply_script(self._script[self._script_pos])
                self._script_pos += 1
            while self.timers and self.timers[0][0] <= self.t_ms:
                heapq.heappop(self.timers)
            reasons += self._check_deaths()
            reasons += self._registration_changes()
            reasons += self._monitor_all()
            if self.t_ms >= self._next_sample_ms:
                self._sample()
                self._next_sample_ms += sample_ms
            if self._pending_realloc_ms is not None and self._pending_realloc_ms <= self.t_ms:
                reasons = self._pending_reasons + reasons
                self._pending_reasons, self._pending_realloc_ms = [], None
                self._settle(reasons, force=True)
            else:
                self._settle(reasons)

        self._advance(max(self.t_ms, min(horizon_ms, self.t_ms)))
        self._sample()
        return self._finish()

    def _settle(self, reasons, force=False):
        """React to context changes: membership updates, re-election, re-allocation."""
        rounds = 0
        while reasons or force:
            force = False
            rounds += 1
            if rounds > 50:
                raise RuntimeError("context changes did not settle")
            membership = [r for r in reasons if r.get("change") in ("join", "leave", "death")]
            if self.sc.strategy == "afv":
                if self.master is None or not self.devices[self.master].alive or \
                        not self.devices[self.master].present:
                    self._elect("master lost")
                if any(self.devices[r["device"]].tier1 for r in membership):
                    self._group_formation("membership change")
                for r in membership:
                    s = self.devices[r["device"]]
                    if not s.tier1 and r["change"] == "join":
                        host = self.devices[s.spec.profile.paired_host]
                        if host.alive and self.master is not None and host.id != self.master:
                            self._send(host.id, self.master, self._init_msg(host), "tier2 join")
            if self.sc.batch_window_s > 0 and any(r.get("change") != "bootstrap" for r in reasons) \
                    and self._pending_realloc_ms is None and rounds == 1:
                self._pending_reasons = list(reasons)
                self._pending_realloc_ms = self.t_ms + int(round(self.sc.batch_window_s * 1000))
                return
            if self.tier1_alive():
                self._reallocate(reasons)
            reasons = self._check_deaths() + self._monitor_all()

    def _finish(self) -> Trace:
        tr = self.trace
        for s in self.devices.values():
            if s.tier1:
                tr.uptime_s[s.id] = s.death_s if s.death_s is not None else self.t_s
                tr.energy[s.id] = {
                    "initial": self.initial[s.id], "final": s.energy_mJ, "baseline": s.used_baseline,
                    "function": s.used_function, "message": s.used_message, "init": s.used_init,
                    "charged": s.charged_in,
                }
        tr.tier1 = tuple(s.id for s in self.devices.values() if s.tier1)
        tr.horizon_s = self.t_s
        return tr


def _plain(v):
    if isinstance(v, Activity):
        return v.label
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, NetworkKind):
        return v.label
    if isinstance(v, bytes):
        return v.decode(errors="replace")
    return v


def _user_activity(contexts) -> Activity:
    from .core import user_activity
    return user_activity(contexts)


def run(scenario: Scenario) -> Trace:
    return Simulation(scenario).run()


# ---------------------------------------------------------------------------
# metrics


def uptime_metrics(trace: Trace, baseline: Optional[Trace] = None) -> dict:
    out = {
        "per_device_uptime_s": dict(trace.uptime_s),
        "system_uptime_s": trace.system_uptime_s,
    }
    if baseline is not None:
        gains = {}
        for d, up in trace.uptime_s.items():
            b = baseline.uptime_s.get(d)
            if b is None:
                continue
            gains[d] = {"hours": (up - b) / 3600.0, "percent": 100.0 * (up - b) / b if b else 0.0}
        sys_b = baseline.system_uptime_s
        out["gain_vs"] = {
            "baseline": baseline.scenario,
            "per_device": gains,
            "system": {"hours": (trace.system_uptime_s - sys_b) / 3600.0,
                       "percent": 100.0 * (trace.system_uptime_s - sys_b) / sys_b if sys_b else 0.0},
        }
    return out
