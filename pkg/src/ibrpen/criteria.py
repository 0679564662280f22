"""Post-disturbance performance criteria, violation profiles and the base-case rule."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .devices import SensitivityFlags

REPORT_SCHEMA_VERSION = 1
CATEGORIES = ("freq", "v_recovery", "v_dip70", "v_dip80", "tie_line")
_EPS = 1e-9


@dataclass(frozen=True)
class CriteriaConfig:
    freq_floor: float = 59.6  # Hz
    freq_max_duration: float = 0.1  # s, six cycles
    recovery_fraction: float = 0.8
    recovery_deadline: float = 20.0  # s after clearing
    dip70_fraction: float = 0.7
    dip70_max: float = 0.5  # s, thirty cycles
    dip80_fraction: float = 0.8
    dip80_max: float = 2.0  # s

    def __post_init__(self):
        for name in ("recovery_fraction", "dip70_fraction", "dip80_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("freq_max_duration", "recovery_deadline", "dip70_max", "dip80_max"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Violation:
    contingency: str
    category: str
    element: str
    worst: float  # seconds, or MVA for tie_line
    onset_s: float

    def as_dict(self):
        return {"contingency": self.contingency, "category": self.category,
                "element": self.element, "worst": self.worst, "onset_s": self.onset_s}


def below_intervals(x, threshold):
    """Maximal runs of ``x < threshold`` as (start, stop) sample index pairs, stop exclusive."""
    mask = np.asarray(x) < threshold
    if not mask.any():
        return []
    edges = np.diff(np.concatenate(([0], mask.view(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def _grid_step(time):
    time = np.asarray(time, dtype=float)
    if time.size < 2:
        return 0.0
    return float(time[1] - time[0])


def _long_dips(x, threshold, max_len, time, dt, contingency, category, element, offset=0):
    out = []
    for a, b in below_intervals(x, threshold):
        length = (b - a) * dt
        if length > max_len + _EPS:
            out.append(Violation(contingency, category, element, length, float(time[offset + a])))
    return out


def check_frequency(time, freq, bus_ids, cfg: CriteriaConfig = CriteriaConfig(), contingency=""):
    """One violation per maximal interval with f below the floor lasting longer than allowed.

    ``freq`` is (samples, buses) on the uniform grid ``time``; an interval of
    n samples lasts n*dt.
    """
    freq = np.asarray(freq, dtype=float)
    dt = _grid_step(time)
    out = []
    for j, bus in enumerate(bus_ids):
        out += _long_dips(freq[:, j], cfg.freq_floor, cfg.freq_max_duration, time, dt,
                          contingency, "freq", str(bus))
    return out


def check_voltage(time, vm, v_init, bus_ids, clear_time, cfg: CriteriaConfig = CriteriaConfig(),
                  contingency=""):
    """Recovery, 70% and 80% dip checks per bus, all measured from ``clear_time``."""
    time = np.asarray(time, dtype=float)
    vm = np.asarray(vm, dtype=float)
    v_init = np.asarray(v_init, dtype=float)
    dt = _grid_step(time)
    start = int(np.searchsorted(time, clear_time - _EPS))
    if start >= time.size:
        return []
    deadline = min(clear_time + cfg.recovery_deadline, float(time[-1]))
    stop = int(np.searchsorted(time, deadline + _EPS))
    out = []
    for j, bus in enumerate(bus_ids):
        x = vm[start:, j]
        v0 = v_init[j]
        window = vm[start:stop, j]
        if not (window >= cfg.recovery_fraction * v0).any():
            worst = max(deadline - float(time[start]), dt)
            out.append(Violation(contingency, "v_recovery", str(bus), worst, float(time[start])))
        out += _long_dips(x, cfg.dip70_fraction * v0, cfg.dip70_max, time, dt, contingency,
                          "v_dip70", str(bus), start)
        out += _long_dips(x, cfg.dip80_fraction * v0, cfg.dip80_max, time, dt, contingency,
                          "v_dip80", str(bus), start)
    return out


def check_interfaces(time, mva, iface_ids, limits, contingency=""):
    """One violation per interface whose peak |S| exceeds its limit; worst = overflow MVA."""
    mva = np.asarray(mva, dtype=float)
    out = []
    for j, iid in enumerate(iface_ids):
        s = mva[:, j]
        if s.size == 0:
            continue
        peak = float(s.max())
        if peak > limits[iid]:
            onset = float(time[int(np.argmax(s > limits[iid]))])
            out.append(Violation(contingency, "tie_line", str(iid), peak - limits[iid], onset))
    return out


def measurement_start(contingency):
    """Last fault-clear time; for fault-free contingencies, the first event time."""
    clears = [ev.t for ev in contingency.events if ev.kind == "bus_fault_clear"]
    if clears:
        return max(clears)
    if contingency.events:
        return min(ev.t for ev in contingency.events)
    return 0.0


def evaluate_result(case, contingency, result, cfg: CriteriaConfig = CriteriaConfig()):
    """All violations of one simulated contingency."""
    cid = contingency.id
    if result.time.size == 0:
        return []
    out = check_frequency(result.time, result.freq, result.bus_ids, cfg, cid)
    vm = np.abs(result.v)
    out += check_voltage(result.time, vm, vm[0], result.bus_ids, measurement_start(contingency),
                         cfg, cid)
    limits = {i.id: i.limit for i in case.interfaces}
    out += check_interfaces(result.time, result.iface_mva, result.iface_ids, limits, cid)
    return out


@dataclass
class ContingencyOutcome:
    """Violations of one contingency plus its divergence note, if any."""

    contingency: str
    violations: list
    diverged: str | None = None


@dataclass
class ViolationProfile:
    contingencies: tuple
    counts: dict = field(default_factory=dict)  # (contingency, category) -> int
    overflow: dict = field(default_factory=dict)  # (contingency, interface) -> MVA
    divergences: dict = field(default_factory=dict)  # contingency -> message
    flags: SensitivityFlags = field(default_factory=SensitivityFlags)

    def count(self, contingency, category):
        return self.counts.get((contingency, category), 0)

    def total(self, category=None):
        return sum(n for (_, cat), n in self.counts.items() if category in (None, cat))

    def to_dict(self):
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "flags": self.flags.as_dict(),
            "contingencies": list(self.contingencies),
            "counts": [{"contingency": c, "category": k, "count": n}
                       for (c, k), n in sorted(self.counts.items())],
            "overflow": [{"contingency": c, "interface": i, "mva": v}
                         for (c, i), v in sorted(self.overflow.items())],
            "divergences": [{"contingency": c, "message": m}
                            for c, m in sorted(self.divergences.items())],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported profile schema_version {d.get('schema_version')!r}")
        return cls(
            contingencies=tuple(d["contingencies"]),
            counts={(e["contingency"], e["category"]): e["count"] for e in d["counts"]},
            overflow={(e["contingency"], e["interface"]): e["mva"] for e in d["overflow"]},
            divergences={e["contingency"]: e["message"] for e in d["divergences"]},
            flags=SensitivityFlags(**d["flags"]),
        )


def build_profile(outcomes, flags: SensitivityFlags = SensitivityFlags()):
    """Aggregate per-contingency outcomes; merge order is by contingency id."""
    outcomes = sorted(outcomes, key=lambda o: o.contingency)
    counts, overflow, div = {}, {}, {}
    for o in outcomes:
        for v in o.violations:
            key = (o.contingency, v.category)
            counts[key] = counts.get(key, 0) + 1
            if v.category == "tie_line":
                k = (o.contingency, v.element)
                overflow[k] = max(overflow.get(k, 0.0), v.worst)
        if o.diverged is not None:
            div[o.contingency] = o.diverged
    return ViolationProfile(tuple(o.contingency for o in outcomes), counts, overflow, div, flags)


def profile_acceptable(candidate: ViolationProfile, base: ViolationProfile, overflow_tol=0.5):
    """Base-case rule: the candidate may not add violations, overflow or divergences.

    Returns ``(acceptable, breaches)`` where each breach is a JSON-ready dict.
    """
    if set(candidate.contingencies) != set(base.contingencies):
        raise ValueError("profiles cover different contingency sets")
    if candidate.flags != base.flags:
        raise ValueError(f"profile flag mismatch: candidate {candidate.flags.label}, "
                         f"base {base.flags.label}")
    breaches = []
    for (c, cat), n in sorted(candidate.counts.items()):
        b = base.count(c, cat)
        if n > b:
            breaches.append({"kind": "count", "contingency": c, "category": cat,
                             "candidate": n, "base": b})
    for (c, iface), mva in sorted(candidate.overflow.items()):
        b = base.overflow.get((c, iface), 0.0)
        if mva > b + overflow_tol:
            breaches.append({"kind": "overflow", "contingency": c, "interface": iface,
                             "candidate": mva, "base": b})
    for c, msg in sorted(candidate.divergences.items()):
        if c not in base.divergences:
            breaches.append({"kind": "divergence", "contingency": c, "message": msg})
    return not breaches, breaches


def violations_json(violations):
    rows = sorted((v.as_dict() for v in violations),
                  key=lambda d: (d["contingency"], d["category"], d["element"], d["onset_s"]))
    return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "violations": rows},
                      indent=2, sort_keys=True) + "\n"


def diff_json(breaches):
    return json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "breaches": list(breaches)},
                      indent=2, sort_keys=True) + "\n"
