"""Acceptance checks shared by ``panalloc validate`` and the test-suite."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import allocator, protocol
from .core import (
    Activity, DeviceKind, EnergyCatalog, FunctionType, NetworkKind, Registration, SamplingSpeed,
    function_energy_per_interval, load_energy_catalog,
)
from .experiments import SweepConfig, STRATEGIES, gap_by_point, run_points, soc_sweep, sweep_functions, sweep_ratio
from .simulator import Scenario, Trace, load_scenario, run, scenario_from_dict, uptime_metrics

COST_RATIOS = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    target: str
    measured: str
    tolerance: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.number}. {self.name}: target {self.target} ({self.tolerance}); "
                f"measured {self.measured}")


def data_path(*parts: str) -> Path:
    return Path(str(resources.files("panalloc").joinpath("data", *parts)))


def scenario_path(name: str) -> Path:
    return data_path("scenarios", f"{name}.json")


def golden_fixtures() -> list[dict]:
    folder = data_path("protocol_golden")
    return [json.loads(p.read_text()) for p in sorted(folder.glob("*.json"))]


# ---------------------------------------------------------------------------
# random protocol messages


def _rand_bytes(rng: np.random.Generator, max_len: int) -> bytes:
    return rng.bytes(int(rng.integers(0, max_len + 1)))


def _rand_f32(rng: np.random.Generator) -> float:
    return protocol.f32(float(rng.normal(0.0, 1e4)))


def random_message(rng: np.random.Generator) -> protocol.WireMessage:
    """A uniformly chosen message type with random but valid field values."""
    kind = int(rng.integers(5))
    fn = [int(f) for f in FunctionType]
    if kind == 0:
        nets = tuple(protocol.NetworkEntry(_rand_bytes(rng, 12), _rand_f32(rng)) for _ in range(rng.integers(0, 4)))
        funcs = tuple(protocol.FunctionEntry(int(rng.choice(fn)), _rand_f32(rng)) for _ in range(rng.integers(0, 5)))
        return protocol.InitializationMsg(int(rng.integers(0, 2**63)) * 2 + int(rng.integers(2)),
                                          int(rng.choice([int(k) for k in DeviceKind])), nets, funcs)
    if kind == 1:
        net = int(rng.choice([protocol.NO_NETWORK] + [int(n) for n in NetworkKind]))
        return protocol.ContextSensorMsg(int(rng.integers(0, 2**63)) * 2 + int(rng.integers(2)),
                                         int(rng.integers(0, 101)),
                                         int(rng.integers(2)), int(rng.choice([int(a) for a in Activity])),
                                         net, _rand_bytes(rng, 16) if net else b"", _rand_f32(rng))
    if kind == 2:
        return protocol.ContextRequestMsg(int(rng.choice(fn)), _rand_bytes(rng, 40))
    if kind == 3:
        rd = tuple((int(r), int(d)) for r, d in rng.integers(0, 256, size=(rng.integers(0, 6), 2)))
        vd = tuple((int(rng.choice(fn)), int(rng.integers(0, 256))) for _ in range(rng.integers(0, 6)))
        return protocol.AssignmentsMsg(rd, vd)
    return protocol.DataMsg(tuple((int(rng.choice(fn)), _rand_bytes(rng, 24)) for _ in range(rng.integers(0, 4))))


# ---------------------------------------------------------------------------
# scenarios used by several checks


def init_overhead_scenario(n: int, catalog: Optional[EnergyCatalog] = None) -> Scenario:
    """``n`` idle phones and nothing else for one second."""
    return scenario_from_dict({
        "name": f"init_{n}",
        "horizon_s": 1,
        "devices": [{"id": i + 1, "kind": "Phone", "battery_capacity_mAh": 2300, "functions": ["Accelerometer"]}
                    for i in range(n)],
    }, catalog=catalog or load_energy_catalog())


def uptime_scenario(name: str, catalog: Optional[EnergyCatalog] = None) -> Scenario:
    return load_scenario(scenario_path(f"uptime_{name}"), catalog=catalog)


def conservation_error(trace: Trace) -> float:
    """Largest relative energy-balance error over the devices of a trace."""
    worst = 0.0
    for e in trace.energy.values():
        spent = e["baseline"] + e["function"] + e["message"] + e["init"]
        expected = e["initial"] - spent + e["charged"]
        worst = max(worst, abs(expected - e["final"]) / max(e["initial"], 1.0))
    return worst


def soc_monotone(trace: Trace) -> bool:
    last: dict = {}
    for t, dev, soc in trace.soc_series:
        if dev in last and soc > last[dev] + 1e-12:
            return False
        last[dev] = soc
    return True


def allocations_valid(trace: Trace) -> bool:
    for event in trace.allocations():
        for label, inst_d in event["instances"].items():
            inst = allocator.FapInstance.from_dict(inst_d)
            a = event["assignments"][label]
            x, y = np.array(a["x"]), np.array(a["y"])
            assignment = allocator.Assignment(x, y, float(a["total_cost"]), inst.requests, inst.devices)
            if allocator.feasibility_violations(inst, assignment):
                return False
    return True


def trace_fingerprint(trace: Trace) -> str:
    return json.dumps({"trace": trace.to_dict(), "soc": trace.soc_series}, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# criteria


def check_greedy_gap(trials: int = 1000, seed: int = 0) -> CriterionResult:
    start = time.perf_counter()
    rows = sweep_ratio(SweepConfig(fc_ratios=COST_RATIOS, n_trials=trials, seed=seed))
    elapsed = time.perf_counter() - start
    gaps = gap_by_point(rows, "ratio")
    worst = max(gaps.values())
    return CriterionResult(1, "greedy-vs-exact gap over F/C ratios", "mean gap <= 1% at every ratio, < 60 s",
                           f"max mean gap {worst:.3f}% ({', '.join(f'{k:g}:{v:.3f}' for k, v in gaps.items())}); "
                           f"{elapsed:.1f} s", "<= 1%", worst <= 1.0 and elapsed < 60.0)


def check_scaling_gap(trials: int = 100, seed: int = 0, max_functions: int = 20) -> CriterionResult:
    rows = sweep_functions(SweepConfig(n_functions=tuple(range(1, max_functions + 1)), n_trials=trials, seed=seed))
    gaps = gap_by_point(rows, "n_functions")
    worst = max(gaps.values())
    return CriterionResult(2, f"greedy-vs-exact gap for 1..{max_functions} functions", "about 2-3%",
                           f"max mean gap {worst:.3f}%", "<= 3%", worst <= 3.0)


def check_low_ratio(trials: int = 1000, seed: int = 0) -> CriterionResult:
    cfg = SweepConfig(fc_ratios=(0.1,), n_trials=trials, seed=seed)
    costs = run_points(cfg, [(0.1, 1)])[0]
    g, a = costs[:, STRATEGIES.index("greedy")], costs[:, STRATEGIES.index("all")]
    dev = float(np.mean(np.abs(g - a) / a) * 100.0)
    return CriterionResult(3, "greedy matches ALL at F/C = 0.1", "ALL as good as optimal",
                           f"mean |greedy-ALL|/ALL {dev:.4f}%", "<= 1%", dev <= 1.0)


def check_energy_arithmetic(catalog: Optional[EnergyCatalog] = None) -> CriterionResult:
    catalog = catalog or load_energy_catalog()
    reg = Registration("tracker", FunctionType.ACCELEROMETER, origin_device=2,
                       sampling_speed=SamplingSpeed.FASTEST, report_interval_s=60.0,
                       payload_bytes_per_report=70_000)
    e = function_energy_per_interval(catalog, reg, DeviceKind.PHONE, executing_device_id=1)
    return CriterionResult(4, "accelerometer FASTEST + 70 kB sync per minute on the phone", "5932.6 mJ",
                           f"{e:.4f} mJ", "+-0.1 mJ", abs(e - 5932.6) <= 0.1)


def two_device_gains(catalog: Optional[EnergyCatalog] = None) -> dict:
    afv = run(uptime_scenario("afv", catalog))
    watch_only = run(uptime_scenario("watch_only", catalog))
    phone_only = run(uptime_scenario("phone_only", catalog))
    w = uptime_metrics(afv, watch_only)["gain_vs"]["per_device"][2]["hours"]
    p = uptime_metrics(afv, phone_only)["gain_vs"]["per_device"][1]["hours"]
    return {"watch_gain_h": w, "phone_gain_h": p}


def check_two_device_uptime(catalog: Optional[EnergyCatalog] = None) -> CriterionResult:
    g = two_device_gains(catalog)
    ok = abs(g["watch_gain_h"] - 2.0) <= 0.5 and abs(g["phone_gain_h"] - 0.5) <= 0.25
    return CriterionResult(5, "two-device uptime gains", "watch +2 h, phone +0.5 h",
                           f"watch {g['watch_gain_h']:+.2f} h, phone {g['phone_gain_h']:+.2f} h",
                           "+-0.5 h / +-0.25 h", ok)


def soc_sweep_gains(catalog: Optional[EnergyCatalog] = None, socs=(70, 80, 90, 100)) -> list[dict]:
    return soc_sweep(uptime_scenario("afv", catalog), [uptime_scenario("watch_only", catalog), uptime_scenario("all", catalog)], 1, socs)


def check_soc_sweep_gain(catalog: Optional[EnergyCatalog] = None) -> CriterionResult:
    rows = soc_sweep_gains(catalog)
    pct = [r["gain_pct"] for r in rows]
    ok = all(30.0 <= v <= 45.0 for v in pct)
    return CriterionResult(6, "system uptime gain for phone SoC 70-100%", "35-40%",
                           f"{min(pct):.1f}% .. {max(pct):.1f}%", "30-45%", ok)


def check_protocol(n: int = 10_000, seed: int = 0) -> CriterionResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        m = random_message(rng)
        raw = protocol.encode(m)
        if protocol.decode(raw) != m or protocol.wire_size(m) != len(raw):
            bad += 1
    fixtures = golden_fixtures()
    golden_bad = [f["name"] for f in fixtures
                  if protocol.encode(protocol.from_dict(f["message"])).hex() != f["hex"]
                  or protocol.decode(bytes.fromhex(f["hex"])) != protocol.from_dict(f["message"])]
    return CriterionResult(7, "protocol round-trip and golden bytes", "identity, bit-exact",
                           f"{n - bad}/{n} round-trips, {len(fixtures) - len(golden_bad)}/{len(fixtures)} fixtures",
                           "exact", bad == 0 and not golden_bad and len(fixtures) > 0)


def init_overhead(n: int, catalog: Optional[EnergyCatalog] = None) -> float:
    trace = run(init_overhead_scenario(n, catalog))
    return sum(e["init"] for e in trace.energy.values())


def check_init_overhead(catalog: Optional[EnergyCatalog] = None) -> CriterionResult:
    measured = {n: init_overhead(n, catalog) for n in (2, 3, 4, 5)}
    ok = all(v == 600.0 * (n - 1) + 1800.0 for n, v in measured.items())
    return CriterionResult(8, "group-formation energy", "(0.6(n-1)+1.8) J",
                           ", ".join(f"n={n}: {v / 1000:.3f} J" for n, v in measured.items()), "exact", ok)


def _random_fap(rng: np.random.Generator) -> allocator.FapInstance:
    R, D = int(rng.integers(1, 8)), int(rng.integers(1, 7))
    m = rng.random((R, D)) < 0.7
    m[np.arange(R), rng.integers(D, size=R)] = True
    return allocator.FapInstance(tuple(range(R)), tuple(range(D)), rng.uniform(0, 5, D), rng.uniform(0, 5, (R, D)),
                                 m, tuple(int(o) for o in rng.integers(D, size=R)))


def property_failures(n: int = 300, seed: int = 0, catalog: Optional[EnergyCatalog] = None) -> list[str]:
    """Run the allocator and simulator invariants; return the names of broken ones."""
    rng = np.random.default_rng(seed)
    broken = set()
    for _ in range(n):
        inst = _random_fap(rng)
        g, e = allocator.fap_greedy(inst), allocator.fap_exact(inst)
        others = [g, allocator.baseline_all(inst), allocator.baseline_manual(inst, int(rng.integers(1 << 30)))]
        if any(allocator.feasibility_violations(inst, a) for a in [e] + others):
            broken.add("feasibility")
        if any(e.total_cost > a.total_cost + 1e-9 * max(1.0, a.total_cost) for a in others):
            broken.add("exact is a lower bound")
        if not allocator.fap_greedy(inst.scaled(float(rng.uniform(0.01, 100)))).same_choice(g):
            broken.add("greedy scale invariance")
        parts = [_random_fap(rng) for _ in range(int(rng.integers(1, 4)))]
        whole = allocator.block_diagonal(parts)
        for solver in (allocator.fap_greedy, allocator.fap_exact):
            joint = solver(whole).total_cost
            split = sum(solver(p).total_cost for p in parts)
            if not math.isclose(joint, split, rel_tol=1e-9, abs_tol=1e-9):
                broken.add("per-function decomposition")
    traces = [run(uptime_scenario(name, catalog)) for name in ("afv", "watch_only", "all")]
    if any(conservation_error(t) > 1e-6 for t in traces):
        broken.add("energy conservation")
    if not all(soc_monotone(t) for t in traces):
        broken.add("SoC monotonicity")
    if not allocations_valid(traces[0]):
        broken.add("allocation validity")
    if trace_fingerprint(run(uptime_scenario("afv", catalog))) != trace_fingerprint(traces[0]):
        broken.add("determinism")
    return sorted(broken)


def check_properties(catalog: Optional[EnergyCatalog] = None, n: int = 300) -> CriterionResult:
    broken = property_failures(n=n, catalog=catalog)
    return CriterionResult(9, "property suite", "all invariants hold", "broken: " + (", ".join(broken) or "none"),
                           "all green", not broken)


CHECKS: dict[int, Callable[..., CriterionResult]] = {
    1: lambda catalog: check_greedy_gap(),
    2: lambda catalog: check_scaling_gap(),
    3: lambda catalog: check_low_ratio(),
    4: check_energy_arithmetic,
    5: check_two_device_uptime,
    6: check_soc_sweep_gain,
    7: lambda catalog: check_protocol(),
    8: check_init_overhead,
    9: check_properties,
}


def run_all(catalog: Optional[EnergyCatalog] = None) -> list[CriterionResult]:
    return [check(catalog) for check in CHECKS.values()]


def format_table(results: list[CriterionResult]) -> str:
    header = ("criterion", "target", "measured", "tolerance", "result")
    rows = [(f"{r.number}. {r.name}", r.target, r.measured, r.tolerance, "PASS" if r.passed else "FAIL")
            for r in results]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)
