"""Network, device and contingency data model plus the JSON case format.

Everything here is immutable: cases are frozen dataclasses holding tuples,
and modified cases are produced with :func:`dataclasses.replace`.
"""
from __future__ import annotations

import json
import typing
from dataclasses import MISSING, dataclass, field, fields, is_dataclass, replace
from typing import Literal, Optional

import jsonschema

SCHEMA_VERSION = 1

# Shunt admittance used when a fault event does not give one (near-bolted).
DEFAULT_FAULT_ADMITTANCE = complex(1e6, -1e6)


class CaseError(ValueError):
    """Base class for case and contingency input errors."""


class CaseSyntaxError(CaseError):
    def __init__(self, msg, line, column):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


class CaseSchemaError(CaseError):
    def __init__(self, msg, path=""):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Bus:
    id: str
    base_kv: float
    type: Literal["slack", "PV", "PQ"]
    area_id: str
    v_setpoint: Optional[float] = None


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    x: float
    rating: float
    r: float = 0.0
    b_shunt: float = 0.0
    tap: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Governor:
    R: float = 0.05
    Tg: float = 0.5
    p_max: float = 1.0


@dataclass(frozen=True)
class Exciter:
    Ka: float = 100.0
    Ta: float = 0.05
    Efd_max: float = 6.0
    Efd_min: float = -4.0


@dataclass(frozen=True)
class SyncMachine:
    id: str
    bus: str
    mva_base: float
    fuel: Literal["coal", "gas", "hydro", "nuclear", "other"]
    p_out: float
    q_out: float = 0.0
    H: float = 5.0
    D: float = 0.0
    xd: float = 1.8
    xq: float = 1.7
    xd_p: float = 0.3
    xq_p: float = 0.55
    Td0_p: float = 8.0
    Tq0_p: float = 0.4
    governor: Governor = field(default_factory=Governor)
    exciter: Exciter = field(default_factory=Exciter)
    in_service: bool = True


@dataclass(frozen=True)
class Converter:
    """Converter interface and low-voltage power logic parameters."""

    Tfilter: float = 0.02
    rrpwr: float = 10.0
    lvpl_brkpt: float = 0.9
    zerox: float = 0.4
    lvpl_gain: float = 2.44
    i_max: float = 1.2  # converter current limit, plant base


@dataclass(frozen=True)
class DistTrip:
    """Partial-tripping parameters used when a plant is distribution connected."""

    v_trip_full: float = 0.45
    v_trip_start: float = 0.60
    f_trip: float = 59.3
    recoverable_fraction: float = 0.5


@dataclass(frozen=True)
class IbrPlant:
    id: str
    bus: str
    mva_base: float
    p_out: float
    q_out: float = 0.0
    connection: Literal["transmission", "distribution"] = "transmission"
    converter: Converter = field(default_factory=Converter)
    dist_trip: DistTrip = field(default_factory=DistTrip)
    in_service: bool = True


@dataclass(frozen=True)
class Zip:
    z: float = 1.0
    i: float = 0.0
    p: float = 0.0


@dataclass(frozen=True)
class Motor:
    Vstall: float = 0.42
    Tstall: float = 0.033
    r_stall: float = 0.124
    x_stall: float = 0.114
    thermal_trip_time: float = 2.0
    thermal_trip_fraction: float = 0.5


@dataclass(frozen=True)
class CompositeLoad:
    id: str
    bus: str
    p: float
    q: float = 0.0
    zip_p: Zip = field(default_factory=Zip)
    zip_q: Zip = field(default_factory=Zip)
    motor_fraction: float = 0.0
    motor: Motor = field(default_factory=Motor)
    stall_enabled: bool = True


@dataclass(frozen=True)
class Area:
    id: str
    name: str = ""
    study_area: bool = False


@dataclass(frozen=True)
class InterfaceMember:
    branch_id: str
    metered_end: Literal["from", "to"] = "from"
    sign: Literal[1, -1] = 1


@dataclass(frozen=True)
class Interface:
    id: str
    members: tuple[InterfaceMember, ...]
    limit: float
    name: str = ""


@dataclass(frozen=True)
class SystemCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    machines: tuple[SyncMachine, ...] = ()
    ibr_plants: tuple[IbrPlant, ...] = ()
    loads: tuple[CompositeLoad, ...] = ()
    areas: tuple[Area, ...] = ()
    interfaces: tuple[Interface, ...] = ()
    system_mva_base: float = 100.0
    nominal_frequency: float = 60.0

    def bus_index(self):
        return {b.id: k for k, b in enumerate(self.buses)}

    def study_area_id(self):
        ids = [a.id for a in self.areas if a.study_area]
        if len(ids) != 1:
            raise CaseError(f"expected exactly one study area, found {len(ids)}")
        return ids[0]

    def study_buses(self):
        area = self.study_area_id()
        return {b.id for b in self.buses if b.area_id == area}


EventKind = Literal["bus_fault_apply", "bus_fault_clear", "branch_trip", "machine_trip", "ibr_trip"]


@dataclass(frozen=True)
class Event:
    t: float
    kind: EventKind
    target: str
    fault_admittance: Optional[complex] = None


@dataclass(frozen=True)
class Contingency:
    id: str
    label: str = ""
    events: tuple[Event, ...] = ()


# ---------------------------------------------------------------------------
# Dataclass <-> JSON schema

_TOP_LEVEL = ("buses", "branches", "machines", "ibr_plants", "loads", "areas", "interfaces")


def _type_schema(tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if is_dataclass(tp):
        return _dataclass_schema(tp)
    if origin is Literal:
        return {"enum": list(args)}
    if origin is typing.Union:
        non_null = [a for a in args if a is not type(None)]
        return {"anyOf": [_type_schema(non_null[0]), {"type": "null"}]}
    if origin is tuple:
        return {"type": "array", "items": _type_schema(args[0])}
    if tp is bool:
        return {"type": "boolean"}
    if tp is float:
        return {"type": "number"}
    if tp is int:
        return {"type": "integer"}
    if tp is str:
        return {"type": "string"}
    raise TypeError(f"no schema mapping for {tp!r}")


def _dataclass_schema(cls):
    hints = typing.get_type_hints(cls)
    props = {}
    required = []
    for f in fields(cls):
        props[f.name] = _type_schema(hints[f.name])
        if f.default is MISSING and f.default_factory is MISSING:
            required.append(f.name)
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


def case_schema():
    """JSON schema of the case file (generated from the dataclasses above)."""
    hints = typing.get_type_hints(SystemCase)
    props = {
        "system": {
            "type": "object",
            "properties": {
                "schema_version": {"const": SCHEMA_VERSION},
                "system_mva_base": {"type": "number", "exclusiveMinimum": 0},
                "nominal_frequency": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["schema_version"],
            "additionalProperties": False,
        }
    }
    for name in _TOP_LEVEL:
        props[name] = _type_schema(hints[name])
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "properties": props,
        "required": ["system", "buses"],
        "additionalProperties": False,
    }


def _build(tp, value):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        return tp(**{k: _build(hints[k], v) for k, v in value.items()})
    if origin is tuple:
        return tuple(_build(typing.get_args(tp)[0], v) for v in value)
    if origin is typing.Union:
        return None if value is None else _build(typing.get_args(tp)[0], value)
    if tp is float:
        return float(value)
    return value


def _load_json(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None


def _check_schema(data, schema):
    validator = jsonschema.Draft202012Validator(schema)
    error = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if error is not None:
        path = "/".join(str(p) for p in error.absolute_path)
        raise CaseSchemaError(error.message, path)


def _check_references(case):
    buses = {b.id for b in case.buses}
    areas = {a.id for a in case.areas}
    branches = {br.id for br in case.branches}
    for k, b in enumerate(case.buses):
        if areas and b.area_id not in areas:
            raise CaseSchemaError(f"unknown area {b.area_id!r}", f"buses/{k}/area_id")
    for k, br in enumerate(case.branches):
        for end in ("from_bus", "to_bus"):
            if getattr(br, end) not in buses:
                raise CaseSchemaError(f"unknown bus {getattr(br, end)!r}", f"branches/{k}/{end}")
    for kind in ("machines", "ibr_plants", "loads"):
        for k, dev in enumerate(getattr(case, kind)):
            if dev.bus not in buses:
                raise CaseSchemaError(f"unknown bus {dev.bus!r}", f"{kind}/{k}/bus")
    for k, iface in enumerate(case.interfaces):
        for m, member in enumerate(iface.members):
            if member.branch_id not in branches:
                raise CaseSchemaError(
                    f"unknown branch {member.branch_id!r}", f"interfaces/{k}/members/{m}/branch_id"
                )


def parse_case(text):
    """Parse case-file text into a :class:`SystemCase`.

    Raises :class:`CaseSyntaxError` for malformed JSON and
    :class:`CaseSchemaError` (carrying the offending field path) for unknown
    fields, wrong types and dangling references.
    """
    data = _load_json(text)
    _check_schema(data, case_schema())
    hints = typing.get_type_hints(SystemCase)
    kwargs = {name: _build(hints[name], data.get(name, [])) for name in _TOP_LEVEL}
    system = data["system"]
    for key in ("system_mva_base", "nominal_frequency"):
        if key in system:
            kwargs[key] = float(system[key])
    case = SystemCase(**kwargs)
    _check_references(case)
    return case


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def case_to_dict(case):
    out = {
        "system": {
            "schema_version": SCHEMA_VERSION,
            "system_mva_base": case.system_mva_base,
            "nominal_frequency": case.nominal_frequency,
        }
    }
    for name in _TOP_LEVEL:
        out[name] = _plain(getattr(case, name))
    return out


def emit_case(case):
    return json.dumps(case_to_dict(case), indent=2) + "\n"


def load_case(path):
    with open(path) as fh:
        return parse_case(fh.read())


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Issue:
    severity: Literal["error", "warning"]
    element: str
    message: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    def add(self, element, message, severity="error"):
        self.issues.append(Issue(severity, element, message))

    @property
    def errors(self):
        return [i for i in self.issues if i.severity == "error"]

    def __bool__(self):
        return bool(self.issues)

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)

    def __str__(self):
        return "\n".join(f"{i.severity}: {i.element}: {i.message}" for i in self.issues)


def validate_case(case):
    """Check every type invariant of ``case``; the report is empty iff all hold."""
    rep = ValidationReport()
    kinds = ("buses", "branches", "machines", "ibr_plants", "loads", "areas", "interfaces")
    for kind in kinds:
        seen = set()
        for item in getattr(case, kind):
            if item.id in seen:
                rep.add(f"{kind}:{item.id}", "duplicate id")
            seen.add(item.id)

    bus_ids = {b.id for b in case.buses}
    area_ids = {a.id for a in case.areas}
    branch_ids = {br.id for br in case.branches}

    slack = [b.id for b in case.buses if b.type == "slack"]
    if len(slack) != 1:
        names = ", ".join(slack) if slack else "none"
        rep.add("buses:" + ",".join(slack), f"expected exactly one slack bus, found {len(slack)} ({names})")
    for b in case.buses:
        el = f"buses:{b.id}"
        if not b.base_kv > 0:
            rep.add(el, f"base_kv must be > 0 (got {b.base_kv})")
        if b.v_setpoint is not None and not 0.8 < b.v_setpoint < 1.2:
            rep.add(el, f"v_setpoint {b.v_setpoint} outside (0.8, 1.2)")
        if b.type in ("slack", "PV") and b.v_setpoint is None:
            rep.add(el, f"{b.type} bus needs a v_setpoint")
        if b.area_id not in area_ids:
            rep.add(el, f"unknown area {b.area_id!r}")

    for br in case.branches:
        el = f"branches:{br.id}"
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                rep.add(el, f"unknown bus {end!r}")
        if br.x == 0:
            rep.add(el, "x must be nonzero")
        if not br.rating > 0:
            rep.add(el, f"rating must be > 0 (got {br.rating})")

    for m in case.machines:
        el = f"machines:{m.id}"
        if m.bus not in bus_ids:
            rep.add(el, f"unknown bus {m.bus!r}")
        if not m.H > 0:
            rep.add(el, f"H must be > 0 (got {m.H})")
        if not 0 < m.governor.R <= 0.1:
            rep.add(el, f"governor R {m.governor.R} outside (0, 0.1]")
        if not m.xd >= m.xd_p > 0:
            rep.add(el, f"need xd >= xd_p > 0 (xd={m.xd}, xd_p={m.xd_p})")

    for p in case.ibr_plants:
        el = f"ibr_plants:{p.id}"
        c, d = p.converter, p.dist_trip
        if p.bus not in bus_ids:
            rep.add(el, f"unknown bus {p.bus!r}")
        if not 0 <= c.zerox < c.lvpl_brkpt <= 1:
            rep.add(el, f"need 0 <= zerox < lvpl_brkpt <= 1 (zerox={c.zerox}, lvpl_brkpt={c.lvpl_brkpt})")
        if not 0 <= d.recoverable_fraction <= 1:
            rep.add(el, f"recoverable_fraction {d.recoverable_fraction} outside [0, 1]")
        if not d.v_trip_full < d.v_trip_start:
            rep.add(el, f"need v_trip_full < v_trip_start ({d.v_trip_full}, {d.v_trip_start})")

    for ld in case.loads:
        el = f"loads:{ld.id}"
        if ld.bus not in bus_ids:
            rep.add(el, f"unknown bus {ld.bus!r}")
        for axis, z in (("P", ld.zip_p), ("Q", ld.zip_q)):
            parts = (z.z, z.i, z.p)
            if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
                rep.add(el, f"{axis} zip fractions {parts} must be nonnegative and sum to 1")
        if not 0 <= ld.motor_fraction <= 1:
            rep.add(el, f"motor_fraction {ld.motor_fraction} outside [0, 1]")

    n_study = sum(a.study_area for a in case.areas)
    if n_study != 1:
        rep.add("areas:" + ",".join(a.id for a in case.areas if a.study_area),
                f"expected exactly one study area, found {n_study}")

    for iface in case.interfaces:
        el = f"interfaces:{iface.id}"
        if not iface.members:
            rep.add(el, "no members")
        for m in iface.members:
            if m.branch_id not in branch_ids:
                rep.add(el, f"unknown branch {m.branch_id!r}")
        if not iface.limit > 0:
            rep.add(el, f"limit must be > 0 (got {iface.limit})")
    return rep


# ---------------------------------------------------------------------------
# Contingencies

_CONTINGENCY_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "id": {"type": "string"},
            "label": {"type": "string"},
            "events": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "t": {"type": "number", "minimum": 0},
                        "kind": {"enum": list(typing.get_args(EventKind))},
                        "target": {"type": "string"},
                        "fault_admittance": {
                            "type": "array",
                            "items": {"type": "number"},
                            "minItems": 2,
                            "maxItems": 2,
                        },
                    },
                    "required": ["t", "kind", "target"],
                    "additionalProperties": False,
                },
            },
        },
        "required": ["id", "events"],
        "additionalProperties": False,
    },
}


def contingency_schema():
    return _CONTINGENCY_SCHEMA


def _check_fault_pairing(cont, t_stop):
    open_faults = {}
    for k, ev in enumerate(cont.events):
        where = f"{cont.id}/events/{k}"
        if ev.t > t_stop:
            raise CaseSchemaError(f"event at t={ev.t} past t_stop={t_stop}", where)
        if ev.kind == "bus_fault_apply":
            if ev.target in open_faults:
                raise CaseSchemaError(f"second fault applied at bus {ev.target!r} before clearing", where)
            open_faults[ev.target] = ev.t
        elif ev.kind == "bus_fault_clear":
            if ev.target not in open_faults:
                raise CaseSchemaError(f"fault clear at bus {ev.target!r} without a prior apply", where)
            del open_faults[ev.target]
    if open_faults:
        bus = next(iter(open_faults))
        raise CaseSchemaError(f"fault applied at bus {bus!r} is never cleared", cont.id)


def parse_contingency_set(text, t_stop=20.0):
    """Parse a contingency file: a JSON list of ``{id, label, events}`` objects.

    Events are sorted by time (stable, so same-time events keep file order).
    """
    data = _load_json(text)
    _check_schema(data, _CONTINGENCY_SCHEMA)
    out = []
    seen = set()
    for k, raw in enumerate(data):
        if raw["id"] in seen:
            raise CaseSchemaError(f"duplicate contingency id {raw['id']!r}", str(k))
        seen.add(raw["id"])
        events = []
        for ev in raw["events"]:
            y = ev.get("fault_admittance")
            if ev["kind"] == "bus_fault_apply":
                y = DEFAULT_FAULT_ADMITTANCE if y is None else complex(y[0], y[1])
            elif y is not None:
                raise CaseSchemaError("fault_admittance only allowed on bus_fault_apply", f"{raw['id']}")
            events.append(Event(float(ev["t"]), ev["kind"], ev["target"], y))
        events.sort(key=lambda e: e.t)
        cont = Contingency(raw["id"], raw.get("label", ""), tuple(events))
        _check_fault_pairing(cont, t_stop)
        out.append(cont)
    return out


def emit_contingency_set(contingencies):
    out = []
    for c in contingencies:
        events = []
        for ev in c.events:
            d = {"t": ev.t, "kind": ev.kind, "target": ev.target}
            if ev.fault_admittance is not None:
                d["fault_admittance"] = [ev.fault_admittance.real, ev.fault_admittance.imag]
            events.append(d)
        out.append({"id": c.id, "label": c.label, "events": events})
    return json.dumps(out, indent=2) + "\n"


def load_contingencies(path, t_stop=20.0):
    with open(path) as fh:
        return parse_contingency_set(fh.read(), t_stop=t_stop)


def check_contingency_targets(case, contingencies):
    """Raise :class:`CaseSchemaError` if any event targets a missing element."""
    pools = {
        "bus_fault_apply": {b.id for b in case.buses},
        "bus_fault_clear": {b.id for b in case.buses},
        "branch_trip": {b.id for b in case.branches},
        "machine_trip": {m.id for m in case.machines},
        "ibr_trip": {p.id for p in case.ibr_plants},
    }
    for c in contingencies:
        for k, ev in enumerate(c.events):
            if ev.target not in pools[ev.kind]:
                raise CaseSchemaError(f"{ev.kind} targets unknown element {ev.target!r}", f"{c.id}/events/{k}")


def with_items(case, kind, items):
    """Return a copy of ``case`` with the collection ``kind`` replaced."""
    return replace(case, **{kind: tuple(items)})
