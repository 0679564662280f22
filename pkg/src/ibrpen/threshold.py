"""Penetration scenarios and the bisection search for the acceptable IBR share."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

from .case import CaseError, IbrPlant, with_items
from .criteria import CriteriaConfig, ViolationProfile, profile_acceptable
from .devices import SensitivityFlags
from .powerflow import solve_powerflow
from .scan import run_scan
from .simulator import SimulationConfig

log = logging.getLogger(__name__)

RETIRABLE_FUELS = ("coal", "gas")
SENSITIVITIES = {
    "none": SensitivityFlags(),
    "momentary_cessation": SensitivityFlags(momentary_cessation=True),
    "distribution_pv": SensitivityFlags(distribution_pv=True),
    "motor_stall": SensitivityFlags(motor_stall=True),
}


class PenetrationError(ValueError):
    pass


class BracketError(RuntimeError):
    def __init__(self, msg, breaches=()):
        super().__init__(msg)
        self.breaches = list(breaches)


class DeterminismError(RuntimeError):
    pass


@dataclass(frozen=True)
class Addition:
    """A site where new IBR capacity may be placed."""

    id: str
    bus: str
    max_mw: float
    connection: str = "transmission"
    mva_base: float | None = None  # defaults to max_mw


@dataclass(frozen=True)
class PenetrationPlan:
    retirement_order: tuple
    additions: tuple
    dispatch_rule: str = "proportional"  # or "priority": fill additions in listed order

    def validate(self, case):
        machines = {m.id: m for m in case.machines}
        buses = {b.id for b in case.buses}
        for mid in self.retirement_order:
            if mid not in machines:
                raise PenetrationError(f"plan retires unknown machine {mid!r}")
            if machines[mid].fuel not in RETIRABLE_FUELS:
                raise PenetrationError(f"plan retires {mid!r} with fuel {machines[mid].fuel!r}; "
                                       f"only {', '.join(RETIRABLE_FUELS)} may be retired")
        for a in self.additions:
            if a.bus not in buses:
                raise PenetrationError(f"addition {a.id!r} names unknown bus {a.bus!r}")
            if a.max_mw <= 0:
                raise PenetrationError(f"addition {a.id!r} needs positive max_mw")
        retired = sum(machines[mid].p_out for mid in self.retirement_order)
        if sum(a.max_mw for a in self.additions) < retired - 1e-9:
            raise PenetrationError("addition capacity is smaller than the retirable capacity")
        if self.dispatch_rule not in ("proportional", "priority"):
            raise PenetrationError(f"unknown dispatch rule {self.dispatch_rule!r}")

    def to_dict(self):
        return {
            "retirement_order": list(self.retirement_order),
            "additions": [{k: v for k, v in vars(a).items() if v is not None} for a in self.additions],
            "dispatch_rule": self.dispatch_rule,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("retirement_order", ())),
                   tuple(Addition(**a) for a in d.get("additions", ())),
                   d.get("dispatch_rule", "proportional"))


def load_plan(path):
    with open(path) as fh:
        return PenetrationPlan.from_dict(json.load(fh))


def default_plan(case, additions):
    """Retire every study-area coal and gas unit, largest output first."""
    area = case.study_area_id()
    bus_area = {b.id: b.area_id for b in case.buses}
    units = [m for m in case.machines
             if m.in_service and m.fuel in RETIRABLE_FUELS and bus_area[m.bus] == area]
    units.sort(key=lambda m: (-m.p_out, m.id))
    return PenetrationPlan(tuple(m.id for m in units), tuple(additions))


def _study_generation(case):
    area = case.study_area_id()
    bus_area = {b.id: b.area_id for b in case.buses}
    sync = sum(m.p_out for m in case.machines if m.in_service and bus_area[m.bus] == area)
    ibr = sum(p.p_out for p in case.ibr_plants if p.in_service and bus_area[p.bus] == area)
    return sync, ibr


def measure_penetration(case):
    """IBR share of the study area's MW generation."""
    sync, ibr = _study_generation(case)
    total = sync + ibr
    if total <= 0:
        raise PenetrationError("study area has no generation")
    return ibr / total


def max_penetration(case, plan):
    sync, ibr = _study_generation(case)
    by_id = {m.id: m for m in case.machines}
    retired = sum(by_id[mid].p_out for mid in plan.retirement_order if by_id[mid].in_service)
    return (ibr + retired) / (sync + ibr)


def _split_additions(plan, amount):
    cap = [a.max_mw for a in plan.additions]
    if plan.dispatch_rule == "proportional":
        total = sum(cap)
        return [amount * c / total for c in cap]
    out, left = [], amount
    for c in cap:
        take = min(c, left)
        out.append(take)
        left -= take
    return out


def apply_penetration(case, p, plan: PenetrationPlan, solve=True):
    """Case with the study-area IBR share moved to ``p``.

    Whole units leave service in plan order while the retired MW stays within
    the IBR MW to be added; the next unit in order gives up the remainder of
    its output. New IBR output is split over the plan's addition sites, so
    study-area generation is unchanged. The power flow is re-solved as a check.
    """
    plan.validate(case)
    sync, ibr = _study_generation(case)
    total = sync + ibr
    if total <= 0:
        raise PenetrationError("study area has no generation")
    needed = p * total - ibr
    p_max = max_penetration(case, plan)
    if needed < -1e-9 or p > p_max + 1e-9:
        raise PenetrationError(f"penetration {p:.6f} outside reachable range "
                               f"[{ibr / total:.6f}, {p_max:.6f}]")
    needed = max(needed, 0.0)

    machines = {m.id: m for m in case.machines}
    left = needed
    for mid in plan.retirement_order:
        m = machines[mid]
        if not m.in_service or left <= 1e-9:
            continue
        if m.p_out <= left + 1e-9:
            machines[mid] = replace(m, in_service=False)
            left -= m.p_out
        else:
            machines[mid] = replace(m, p_out=m.p_out - left)
            left = 0.0
    new_machines = [machines[m.id] for m in case.machines]

    plants = list(case.ibr_plants)
    existing = {pl.id for pl in plants}
    for a, mw in zip(plan.additions, _split_additions(plan, needed)):
        if mw <= 0:
            continue
        if a.id in existing:
            raise PenetrationError(f"addition id {a.id!r} clashes with an existing plant")
        plants.append(IbrPlant(id=a.id, bus=a.bus, mva_base=a.mva_base or a.max_mw, p_out=mw,
                               connection=a.connection))
    out = with_items(with_items(case, "machines", new_machines), "ibr_plants", plants)
    if solve:
        try:
            solve_powerflow(out)
        except (RuntimeError, CaseError) as exc:
            raise PenetrationError(f"power flow failed at penetration {p:.4f}: {exc}") from exc
    return out


@dataclass(frozen=True)
class ThresholdConfig:
    p_lo: float
    p_hi: float
    contingencies: tuple = ()
    tol: float = 0.01
    criteria: CriteriaConfig = CriteriaConfig()
    flags: SensitivityFlags = SensitivityFlags()
    overflow_tol: float = 0.5
    sim: SimulationConfig = SimulationConfig()
    jobs: int = 1

    def __post_init__(self):
        if not self.p_lo < self.p_hi:
            raise ValueError("p_lo must be below p_hi")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def sim_config(self):
        return replace(self.sim, flags=self.flags)


@dataclass
class Evaluation:
    p: float
    acceptable: bool
    profile: ViolationProfile | None
    breaches: list


def profile_case(case, cfg: ThresholdConfig):
    """Violation profile of ``case`` over the configured contingencies."""
    return run_scan(case, cfg.contingencies, cfg.sim_config(), cfg.criteria, cfg.jobs).profile


def evaluate_penetration(case_at_p, contingencies, base_profile, cfg: ThresholdConfig):
    """Scan ``case_at_p`` and compare with the base profile."""
    profile = run_scan(case_at_p, contingencies, cfg.sim_config(), cfg.criteria, cfg.jobs).profile
    ok, breaches = profile_acceptable(profile, base_profile, cfg.overflow_tol)
    return ok, profile, breaches


def _summary(breaches):
    out = {}
    for b in breaches:
        key = b.get("category") or b["kind"]
        out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))


@dataclass
class ThresholdResult:
    p_star: float
    flags: SensitivityFlags
    bracket: tuple
    tol: float
    acceptable_profile: ViolationProfile | None
    rejected_profile: ViolationProfile | None
    rejected_p: float | None
    log: list = field(default_factory=list)
    bisection_evaluations: int = 0
    profiles: list = field(default_factory=list, repr=False)  # one per log entry

    def to_dict(self):
        return {
            "p_star": self.p_star,
            "flags": self.flags.as_dict(),
            "sensitivity": self.flags.label,
            "bracket": list(self.bracket),
            "tol": self.tol,
            "rejected_p": self.rejected_p,
            "bisection_evaluations": self.bisection_evaluations,
            "log": self.log,
            "acceptable_profile": None if self.acceptable_profile is None
            else self.acceptable_profile.to_dict(),
            "rejected_profile": None if self.rejected_profile is None
            else self.rejected_profile.to_dict(),
        }


def find_threshold(case, plan, cfg: ThresholdConfig, evaluator=None):
    """Bisect the penetration share to the edge of acceptability.

    ``evaluator(p) -> Evaluation`` defaults to a full scan of the case moved to
    ``p``, judged against the base profile of ``case`` under ``cfg.flags``.
    Only the probes inside the bracket count as bisection evaluations; the
    bracket-end checks and the final re-run at ``p_star`` are extra.
    """
    if evaluator is None:
        evaluator = _scan_evaluator(case, plan, cfg)
    entries, profiles = [], []

    def probe(p, phase):
        ev = evaluator(p)
        first = next((b["contingency"] for b in ev.breaches if "contingency" in b), None)
        entries.append({"phase": phase, "p": p, "acceptable": bool(ev.acceptable),
                        "breaches": _summary(ev.breaches), "first_breach": first})
        profiles.append(ev.profile)
        return ev

    lo = probe(cfg.p_lo, "p_lo")
    if not lo.acceptable:
        raise BracketError("bracket invalid: base level already fails", lo.breaches)
    if cfg.tol >= cfg.p_hi - cfg.p_lo:
        log.warning("tol %.4g is not smaller than the bracket width; returning p_lo", cfg.tol)
        return ThresholdResult(cfg.p_lo, cfg.flags, (cfg.p_lo, cfg.p_hi), cfg.tol, lo.profile,
                               None, None, entries, 0, profiles)
    hi = probe(cfg.p_hi, "p_hi")
    if hi.acceptable:
        return ThresholdResult(cfg.p_hi, cfg.flags, (cfg.p_lo, cfg.p_hi), cfg.tol, hi.profile,
                               None, None, entries, 0, profiles)

    a, b = lo, hi
    n = 0
    while b.p - a.p > cfg.tol:
        mid = probe(0.5 * (a.p + b.p), "bisect")
        n += 1
        if mid.acceptable:
            a = mid
        else:
            b = mid

    check = probe(a.p, "verify")
    if check.acceptable != a.acceptable or (
            a.profile is not None and check.profile is not None
            and check.profile.to_dict() != a.profile.to_dict()):
        raise DeterminismError(f"re-evaluation at p={a.p:.6f} disagrees with the bisection probe")
    return ThresholdResult(a.p, cfg.flags, (cfg.p_lo, cfg.p_hi), cfg.tol, a.profile, b.profile,
                           b.p, entries, n, profiles)


def _scan_evaluator(case, plan, cfg: ThresholdConfig):
    p0 = measure_penetration(case)
    base_profile = profile_case(case, cfg)

    def evaluate(p):
        if abs(p - p0) <= 1e-12:
            ok, breaches = profile_acceptable(base_profile, base_profile, cfg.overflow_tol)
            return Evaluation(p, ok, base_profile, breaches)
        try:
            moved = apply_penetration(case, p, plan)
        except PenetrationError as exc:
            return Evaluation(p, False, None, [{"kind": "powerflow", "message": str(exc)}])
        ok, profile, breaches = evaluate_penetration(moved, cfg.contingencies, base_profile, cfg)
        return Evaluation(p, ok, profile, breaches)

    return evaluate


def run_sensitivity_suite(case, plan, cfg: ThresholdConfig, names=tuple(SENSITIVITIES),
                          evaluator_factory=None):
    """Threshold per sensitivity; each re-profiles the base case under its own flags.

    ``evaluator_factory(flags)`` may supply a stub evaluator per flag set.
    """
    out = {}
    for name in names:
        sub = replace(cfg, flags=SENSITIVITIES[name])
        ev = evaluator_factory(sub.flags) if evaluator_factory else None
        out[name] = find_threshold(case, plan, sub, ev)
    return out
