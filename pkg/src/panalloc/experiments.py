"""Monte-Carlo cost sweeps and battery-uptime studies.

Random instances model a PAN of ``n_devices`` wearables with ``n_requests``
registrations per function. By default each request comes from an app on a
uniformly drawn device, and serving it on that device costs nothing to
deliver; every other (request, device) pair costs a normal draw around
``mu_c``. ``origins="round_robin"`` places request ``r`` on device
``r % n_devices`` instead, and ``origins="none"`` drops the notion of a
requesting device so that every service cost is a normal draw (ALL then
degrades to serving each request from its cheapest device).

Every trial draws from its own generator,
``SeedSequence(seed, spawn_key=(point, trial))``, so serial and parallel runs
produce identical numbers.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .allocator import FapInstance, baseline_all, baseline_manual, fap_exact, fap_greedy
from .simulator import Scenario, run, uptime_metrics

ORIGIN_MODES = ("random", "round_robin", "none")
STRATEGIES = ("greedy", "exact", "all", "manual")
BASELINES = ("exact", "all", "manual")
RATIO_COLUMNS = ("ratio", "strategy", "mean_cost_reduction_pct", "std", "mean_abs_saving", "n_trials")
FUNCTION_COLUMNS = ("n_functions", "strategy", "mean_cost_reduction_pct", "std", "mean_abs_saving", "n_trials")


@dataclass(frozen=True)
class SweepConfig:
    n_devices: int = 5
    n_requests: int = 10
    fc_ratios: tuple = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
    n_functions: tuple = (1,)
    n_trials: int = 1000
    mu_c: float = 1.0
    sigma_factor: float = 0.1
    seed: int = 0
    origins: str = "random"

    def __post_init__(self):
        if self.origins not in ORIGIN_MODES:
            raise ValueError(f"origins must be one of {ORIGIN_MODES}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.sigma_factor < 0:
            raise ValueError("sigma_factor must be >= 0")
        if self.n_devices < 1 or self.n_requests < 1:
            raise ValueError("need at least one device and one request")


def trial_rng(seed: int, point: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(point, trial)))


def random_instance(rng: np.random.Generator, n_devices: int, n_requests: int, ratio: float,
                    mu_c: float = 1.0, sigma_factor: float = 0.1, origins: str = "random") -> FapInstance:
    mu_f = ratio * mu_c
    f = np.clip(rng.normal(mu_f, sigma_factor * mu_f, n_devices), 0.0, None)
    c = np.clip(rng.normal(mu_c, sigma_factor * mu_c, (n_requests, n_devices)), 0.0, None)
    if origins == "none":
        where = ()
    else:
        if origins == "random":
            where = tuple(int(d) for d in rng.integers(n_devices, size=n_requests))
        else:
            where = tuple(r % n_devices for r in range(n_requests))
        c[np.arange(n_requests), where] = 0.0
    return FapInstance(tuple(range(n_requests)), tuple(range(n_devices)), f, c,
                       np.ones((n_requests, n_devices), dtype=bool), where)


def strategy_costs(instances: Sequence[FapInstance], manual_seed) -> dict[str, float]:
    """Total cost of every strategy over independent per-function instances."""
    totals = dict.fromkeys(STRATEGIES, 0.0)
    for inst in instances:
        totals["greedy"] += fap_greedy(inst).total_cost
        totals["exact"] += fap_exact(inst).total_cost
        totals["all"] += baseline_all(inst).total_cost
        totals["manual"] += baseline_manual(inst, manual_seed).total_cost
    return totals


def _trial(cfg: SweepConfig, point: int, trial: int, ratio: float, n_functions: int) -> dict[str, float]:
    rng = trial_rng(cfg.seed, point, trial)
    instances = [random_instance(rng, cfg.n_devices, cfg.n_requests, ratio, cfg.mu_c, cfg.sigma_factor,
                                 cfg.origins)
                 for _ in range(n_functions)]
    manual_seed = int(rng.integers(2**63))
    return strategy_costs(instances, manual_seed)


def _point(args) -> np.ndarray:
    cfg, point, ratio, n_functions = args
    rows = [_trial(cfg, point, t, ratio, n_functions) for t in range(cfg.n_trials)]
    return np.array([[r[s] for s in STRATEGIES] for r in rows])


def run_points(cfg: SweepConfig, points: Sequence[tuple[float, int]], parallel: int = 1) -> list[np.ndarray]:
    """Cost matrices (trials x strategies), one per (ratio, n_functions) point."""
    jobs = [(cfg, i, ratio, nf) for i, (ratio, nf) in enumerate(points)]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_point, jobs))
    return [_point(j) for j in jobs]


def summarize(costs: np.ndarray) -> dict[str, dict[str, float]]:
    """Greedy's cost reduction against each other strategy.

    Reduction is (baseline - greedy) / baseline in percent; against the exact
    solver it is never positive and its negation is the optimality gap.
    """
    greedy = costs[:, STRATEGIES.index("greedy")]
    out = {}
    for name in BASELINES:
        base = costs[:, STRATEGIES.index(name)]
        with np.errstate(divide="ignore", invalid="ignore"):
            pct = np.where(base > 0, (base - greedy) / base * 100.0, 0.0)
        out[name] = {
            "mean_cost_reduction_pct": float(pct.mean()),
            "std": float(pct.std(ddof=1)) if len(pct) > 1 else 0.0,
            "mean_abs_saving": float((base - greedy).mean()),
            "n_trials": int(len(pct)),
        }
    return out


def sweep_ratio(cfg: SweepConfig, parallel: int = 1) -> list[dict]:
    points = [(float(r), cfg.n_functions[0]) for r in cfg.fc_ratios]
    rows = []
    for (ratio, _), costs in zip(points, run_points(cfg, points, parallel)):
        for name, stats in summarize(costs).items():
            rows.append({"ratio": ratio, "strategy": name, **stats})
    return rows


def sweep_functions(cfg: SweepConfig, ratio: float = 1.0, parallel: int = 1) -> list[dict]:
    points = [(ratio, int(n)) for n in cfg.n_functions]
    rows = []
    for (_, nf), costs in zip(points, run_points(cfg, points, parallel)):
        for name, stats in summarize(costs).items():
            rows.append({"n_functions": nf, "strategy": name, **stats})
    return rows


def rows_to_csv(rows: list[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items() if k in columns})
    return buf.getvalue()


def gap_by_point(rows: list[dict], key: str) -> dict:
    return {r[key]: 0.0 - r["mean_cost_reduction_pct"] for r in rows if r["strategy"] == "exact"}


def slope(xs, ys) -> float:
    """Least-squares slope of ys against xs."""
    return float(np.polyfit(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), 1)[0])


# ---------------------------------------------------------------------------
# uptime studies


UPTIME_COLUMNS = ("scenario", "baseline", "device_id", "uptime_h", "baseline_uptime_h", "gain_h", "gain_pct")


def uptime_study(scenario: Scenario, baselines: Sequence[Scenario]) -> tuple[list[dict], dict]:
    """Run a scenario and each baseline; tabulate per-device and system gains."""
    trace = run(scenario)
    rows, summary = [], {"scenario": scenario.name, "baselines": {}}
    summary.update(uptime_metrics(trace))
    for b in baselines:
        bt = run(b)
        m = uptime_metrics(trace, bt)
        summary["baselines"][b.name] = m["gain_vs"]
        for dev, g in m["gain_vs"]["per_device"].items():
            rows.append({"scenario": scenario.name, "baseline": b.name, "device_id": dev,
                         "uptime_h": trace.uptime_s[dev] / 3600.0, "baseline_uptime_h": bt.uptime_s[dev] / 3600.0,
                         "gain_h": g["hours"], "gain_pct": g["percent"]})
        rows.append({"scenario": scenario.name, "baseline": b.name, "device_id": "system",
                     "uptime_h": trace.system_uptime_s / 3600.0, "baseline_uptime_h": bt.system_uptime_s / 3600.0,
                     "gain_h": m["gain_vs"]["system"]["hours"], "gain_pct": m["gain_vs"]["system"]["percent"]})
    return rows, summary


def soc_sweep(scenario: Scenario, baselines: Sequence[Scenario], device_id: int,
              socs: Sequence[float] = tuple(range(10, 101, 10))) -> list[dict]:
    """System-uptime gain of ``scenario`` over each baseline as one device's initial SoC varies."""
    rows = []
    for soc in socs:
        main = run(scenario.with_device(device_id, initial_soc_percent=float(soc)))
        for b in baselines:
            bt = run(b.with_device(device_id, initial_soc_percent=float(soc)))
            g = uptime_metrics(main, bt)["gain_vs"]["system"]
            rows.append({"initial_soc_percent": float(soc), "baseline": b.name,
                         "system_uptime_h": main.system_uptime_s / 3600.0,
                         "baseline_system_uptime_h": bt.system_uptime_s / 3600.0,
                         "gain_h": g["hours"], "gain_pct": g["percent"]})
    return rows


SOC_SWEEP_COLUMNS = ("initial_soc_percent", "baseline", "system_uptime_h", "baseline_system_uptime_h",
                     "gain_h", "gain_pct")


def identity_baseline(scenario: Scenario, name: Optional[str] = None) -> Scenario:
    return replace(scenario, name=name or f"{scenario.name}_copy")
