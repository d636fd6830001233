"""Decision engine: master election and the function allocation problem.

A :class:`FapInstance` is one uncapacitated facility location instance: the
devices implementing one virtual function are the facilities (opening cost
``impl_cost``) and the registrations for that function are the customers
(service cost ``comm_cost``), restricted by the ``mappable`` mask.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyCandidates, InfeasibleRequest, TooLarge

EXACT_MAX_DEVICES = 20
_REL_TIE = 1e-12


@dataclass(frozen=True, eq=False)
class FapInstance:
    requests: tuple
    devices: tuple
    impl_cost: np.ndarray  # (D,)
    comm_cost: np.ndarray  # (R, D)
    mappable: np.ndarray  # (R, D) bool
    origins: tuple = ()  # device index per request, or None

    def __post_init__(self):
        f = np.asarray(self.impl_cost, dtype=float)
        c = np.asarray(self.comm_cost, dtype=float).reshape(len(self.requests), len(self.devices))
        m = np.asarray(self.mappable, dtype=bool).reshape(c.shape)
        if f.shape != (len(self.devices),):
            raise ValueError("impl_cost must have one entry per device")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(c))):
            raise ValueError("costs must be finite")
        if (f < 0).any() or (c < 0).any():
            raise ValueError("costs must be non-negative")
        origins = tuple(self.origins) if self.origins else (None,) * len(self.requests)
        if len(origins) != len(self.requests):
            raise ValueError("one origin per request")
        object.__setattr__(self, "impl_cost", f)
        object.__setattr__(self, "comm_cost", c)
        object.__setattr__(self, "mappable", m)
        object.__setattr__(self, "origins", origins)

    @property
    def n_requests(self) -> int:
        return len(self.requests)

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @classmethod
    def from_maps(cls, requests: Sequence, devices: Sequence, impl_cost: Mapping, comm_cost: Mapping,
                  mappable: Optional[Mapping] = None, origins: Optional[Mapping] = None) -> "FapInstance":
        """Build from dict-keyed costs; absent ``mappable`` entries default to 1."""
        requests, devices = tuple(requests), tuple(devices)
        f = np.array([impl_cost[d] for d in devices], dtype=float)
        c = np.array([[comm_cost.get((r, d), 0.0) for d in devices] for r in requests], dtype=float)
        if mappable is None:
            m = np.ones_like(c, dtype=bool)
        else:
            m = np.array([[bool(mappable.get((r, d), 1)) for d in devices] for r in requests], dtype=bool)
        orig = ()
        if origins:
            orig = tuple(devices.index(origins[r]) if origins.get(r) in devices else None for r in requests)
        return cls(requests, devices, f, c, m, orig)

    def scaled(self, k: float) -> "FapInstance":
        return FapInstance(self.requests, self.devices, self.impl_cost * k, self.comm_cost * k,
                           self.mappable, self.origins)

    def check(self):
        bad = [self.requests[i] for i in range(self.n_requests) if not self.mappable[i].any()]
        if bad:
            raise InfeasibleRequest(f"requests with no mappable device: {bad}")

    def to_dict(self) -> dict:
        return {
            "requests": list(self.requests),
            "devices": list(self.devices),
            "impl_cost": self.impl_cost.tolist(),
            "comm_cost": self.comm_cost.tolist(),
            "mappable": self.mappable.astype(int).tolist(),
            "origins": list(self.origins),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FapInstance":
        return cls(tuple(data["requests"]), tuple(data["devices"]), np.array(data["impl_cost"], dtype=float),
                   np.array(data["comm_cost"], dtype=float), np.array(data["mappable"], dtype=bool),
                   tuple(data.get("origins") or ()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True, eq=False)
class Assignment:
    x: np.ndarray  # (R, D) 0/1
    y: np.ndarray  # (D,) 0/1
    total_cost: float
    requests: tuple = field(default=())
    devices: tuple = field(default=())

    def mapping(self) -> dict:
        """request label -> device label."""
        return {self.requests[i]: self.devices[int(np.argmax(self.x[i]))] for i in range(len(self.requests))}

    def device_of(self, request) -> Hashable:
        return self.mapping()[request]

    def open_devices(self) -> list:
        return [self.devices[j] for j in range(len(self.devices)) if self.y[j]]

    def same_choice(self, other: "Assignment") -> bool:
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    def to_dict(self) -> dict:
        return {"mapping": {str(k): v for k, v in self.mapping().items()},
                "open": self.open_devices(), "total_cost": self.total_cost}


def objective(instance: FapInstance, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.dot(y, instance.impl_cost) + np.sum(x * instance.comm_cost))


def _assignment(instance: FapInstance, choice: Sequence[int]) -> Assignment:
    """Assignment from a device index per request; y is derived from x."""
    x = np.zeros((instance.n_requests, instance.n_devices), dtype=np.int8)
    x[np.arange(instance.n_requests), np.asarray(choice, dtype=int)] = 1
    y = x.max(axis=0) if instance.n_requests else np.zeros(instance.n_devices, dtype=np.int8)
    return Assignment(x, y.astype(np.int8), objective(instance, x, y), instance.requests, instance.devices)


def feasibility_violations(instance: FapInstance, a: Assignment, tol: float = 1e-9) -> list[str]:
    """Checks the four model constraints and the objective value; returns the violations."""
    problems = []
    x, y = np.asarray(a.x), np.asarray(a.y)
    if x.shape != (instance.n_requests, instance.n_devices) or y.shape != (instance.n_devices,):
        return ["shape mismatch"]
    if not (np.isin(x, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        problems.append("x, y must be binary")
    if not (x.sum(axis=1) == 1).all():
        problems.append("each request needs exactly one device")
    if (x > instance.mappable).any():
        problems.append("request assigned to an unmappable device")
    if (x > y[None, :]).any():
        problems.append("request assigned to an inactive device")
    if instance.n_requests and (y > x.max(axis=0)).any():
        problems.append("device active without requests")
    expected = objective(instance, x, y)
    if abs(expected - a.total_cost) > tol * max(1.0, abs(expected)):
        problems.append(f"total_cost {a.total_cost} != objective {expected}")
    return problems


# ---------------------------------------------------------------------------
# master election


def select_master(candidates: Sequence[tuple], lowest_ratio: bool = False):
    """Pick the master among ``(device_id, soc_percent, avg_power_mW)`` triples.

    By default the device with the highest SoC-to-power ratio wins, i.e. the
    one least affected by taking on the master role. ``lowest_ratio=True``
    applies the literal "lowest ratio" criterion instead. Ties go to the
    smallest device id.
    """
    if not candidates:
        raise EmptyCandidates("no Tier-1 candidates for master election")

    def better(a, b):
        # compare soc_a / pw_a against soc_b / pw_b without dividing
        lhs = a[1] * b[2]
        rhs = b[1] * a[2]
        if a[2] == 0 or b[2] == 0:
            lhs, rhs = (float("inf") if a[2] == 0 else a[1] / a[2]), (float("inf") if b[2] == 0 else b[1] / b[2])
        if lhs == rhs:
            return a[0] < b[0]
        return lhs < rhs if lowest_ratio else lhs > rhs

    best = candidates[0]
    for cand in candidates[1:]:
        if better(cand, best):
            best = cand
    return best[0]


# ---------------------------------------------------------------------------
# solvers


def fap_greedy(instance: FapInstance) -> Assignment:
    """Iterative greedy: repeatedly open the device and request set with the
    lowest average cost, then zero that device's opening cost.

    For each device the candidate sets are the prefixes of its mappable,
    still-unassigned requests sorted by ascending service cost. Ties prefer
    the larger set, then the lower device index.
    """
    instance.check()
    f = instance.impl_cost.copy()
    c, m = instance.comm_cost, instance.mappable
    R, D = instance.n_requests, instance.n_devices
    # per-device request order by (cost, request index), built once
    order = [sorted(np.flatnonzero(m[:, d]), key=lambda r, d=d: (c[r, d], r)) for d in range(D)]
    unassigned = np.ones(R, dtype=bool)
    choice = np.full(R, -1)
    while unassigned.any():
        best = None  # (ratio, -size, d)
        for d in range(D):
            cand = [r for r in order[d] if unassigned[r]]
            if not cand:
                continue
            sums = f[d] + np.cumsum(c[cand, d])
            ratios = sums / np.arange(1, len(cand) + 1)
            k = _argmin_prefer_last(ratios)
            key = (ratios[k], k + 1, d)
            if best is None or _better_key(key, best):
                best = key + (cand[: k + 1],)
        _, _, d, chosen = best
        choice[chosen] = d
        unassigned[chosen] = False
        f[d] = 0.0
    return _assignment(instance, choice)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= _REL_TIE * max(abs(a), abs(b))


def _argmin_prefer_last(ratios: np.ndarray) -> int:
    lo = float(ratios.min())
    ties = [i for i, v in enumerate(ratios) if _close(float(v), lo)]
    return ties[-1]


def _better_key(key, best) -> bool:
    ratio, size, d = key
    b_ratio, b_size, b_d = best[:3]
    if not _close(ratio, b_ratio):
        return ratio < b_ratio
    if size != b_size:
        return size > b_size
    return d < b_d


def _open_set_costs(instance: FapInstance, masks: np.ndarray):
    """Objective and per-request choice for a batch of open-device masks (S, D)."""
    c = np.where(instance.mappable, instance.comm_cost, np.inf)  # (R, D)
    masked = np.where(masks[:, None, :], c[None, :, :], np.inf)  # (S, R, D)
    choice = masked.argmin(axis=2)
    service = masked.min(axis=2).sum(axis=1)
    opening = masks.astype(float) @ instance.impl_cost
    return opening + service, choice


def fap_exact(instance: FapInstance) -> Assignment:
    """Exact minimum by enumerating every non-empty set of open devices."""
    D = instance.n_devices
    if D > EXACT_MAX_DEVICES:
        raise TooLarge(f"{D} devices exceeds the enumeration bound of {EXACT_MAX_DEVICES}")
    instance.check()
    if instance.n_requests == 0:
        return _assignment(instance, [])
    best_cost, best_choice = np.inf, None
    bits = np.arange(D)
    chunk = 1 << 12
    for start in range(1, 1 << D, chunk):
        ids = np.arange(start, min(start + chunk, 1 << D))
        masks = (ids[:, None] >> bits[None, :]) & 1 == 1
        costs, choice = _open_set_costs(instance, masks)
        k = int(np.argmin(costs))
        if costs[k] < best_cost:
            best_cost, best_choice = costs[k], choice[k]
    if best_choice is None or not np.isfinite(best_cost):
        raise InfeasibleRequest("no open set serves every request")
    return _assignment(instance, best_choice)


def baseline_all(instance: FapInstance) -> Assignment:
    """Uncoordinated execution: every request is served on its own device where possible.

    Requests whose origin is unknown or cannot serve them fall back to the
    cheapest mappable device.
    """
    instance.check()
    choice = []
    for i in range(instance.n_requests):
        o = instance.origins[i]
        if o is not None and instance.mappable[i, o]:
            choice.append(o)
        else:
            c = np.where(instance.mappable[i], instance.comm_cost[i], np.inf)
            choice.append(int(np.argmin(c)))
    return _assignment(instance, choice)


def baseline_manual(instance: FapInstance, rng_seed) -> Assignment:
    """A user's static choice: one random device that can serve everything."""
    instance.check()
    rng = np.random.default_rng(rng_seed)
    full = np.flatnonzero(instance.mappable.all(axis=0))
    if full.size:
        d = int(rng.choice(full))
        return _assignment(instance, [d] * instance.n_requests)
    choice = [int(rng.choice(np.flatnonzero(instance.mappable[i]))) for i in range(instance.n_requests)]
    return _assignment(instance, choice)


def allocate(groups: Mapping[Hashable, object], build: Callable[[Hashable, object], FapInstance],
             solver: Callable[[FapInstance], Assignment] = fap_greedy) -> dict:
    """Solve one instance per function type and return the per-type assignments."""
    return {key: solver(build(key, requests)) for key, requests in groups.items()}


def total_cost(assignments: Mapping[Hashable, Assignment]) -> float:
    return float(sum(a.total_cost for a in assignments.values()))


def block_diagonal(instances: Sequence[FapInstance]) -> FapInstance:
    """Combine independent instances into one whose blocks cannot mix."""
    R = sum(i.n_requests for i in instances)
    D = sum(i.n_devices for i in instances)
    f = np.zeros(D)
    c = np.zeros((R, D))
    m = np.zeros((R, D), dtype=bool)
    reqs, devs, origins = [], [], []
    r0 = d0 = 0
    for b, inst in enumerate(instances):
        f[d0:d0 + inst.n_devices] = inst.impl_cost
        c[r0:r0 + inst.n_requests, d0:d0 + inst.n_devices] = inst.comm_cost
        m[r0:r0 + inst.n_requests, d0:d0 + inst.n_devices] = inst.mappable
        reqs += [(b, r) for r in inst.requests]
        devs += [(b, d) for d in inst.devices]
        origins += [None if o is None else o + d0 for o in inst.origins]
        r0 += inst.n_requests
        d0 += inst.n_devices
    return FapInstance(tuple(reqs), tuple(devs), f, c, m, tuple(origins))

