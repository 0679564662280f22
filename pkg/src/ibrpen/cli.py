"""Command-line front end: powerflow, simulate, scan and threshold."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .case import CaseError, CaseSchemaError, CaseSyntaxError, check_contingency_targets, \
    load_case, parse_contingency_set, validate_case
from .criteria import CriteriaConfig, diff_json, evaluate_result, violations_json
from .devices import SensitivityFlags
from .powerflow import InitializationError, PowerFlowError, initialize_dynamic_states, \
    solve_powerflow
from .scan import run_scan
from .simulator import SimulationConfig, run_simulation
from .svg import BarStyle, PlotStyle, emit_svg_bars, emit_svg_timeseries
from .threshold import SENSITIVITIES, BracketError, PenetrationError, ThresholdConfig, \
    apply_penetration, find_threshold, load_plan, max_penetration, measure_penetration

EXIT_OK, EXIT_VIOLATIONS, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ibrpen")


class InputError(Exception):
    pass


class NumericalError(Exception):
    pass


def _sha256(data: bytes):
    return hashlib.sha256(data).hexdigest()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class RunManifest:
    """Inputs, configuration and outputs of one run.

    Written as soon as the inputs are read, then finalized with the output
    inventory, so an interrupted run still says what it was doing.
    """

    def __init__(self, out_dir: Path, command, config):
        self.path = out_dir / "manifest.json"
        self.out_dir = out_dir
        self.data = {
            "tool": "ibrpen",
            "version": __version__,
            "command": command,
            "inputs": {},
            "config": config,
            "status": "running",
            "started_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "outputs": [],
        }

    def add_input(self, role, path, content: bytes):
        self.data["inputs"][role] = {"path": str(path), "sha256": _sha256(content)}

    def write(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(_dump(self.data))

    def finalize(self, status, outputs):
        self.data["status"] = status
        self.data["finished_utc"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.data["outputs"] = [
            {"path": str(p.relative_to(self.out_dir)), "sha256": _sha256(p.read_bytes())}
            for p in sorted(outputs)
        ]
        self.write()


class Writer:
    """Single writer for all run artifacts; remembers what it wrote."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.written = []

    def text(self, name, content):
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content)
        self.written.append(p)
        return p


# ---------------------------------------------------------------------------
# Shared argument handling


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _add_common(p, jobs=False):
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes for contingency runs")


def _add_sim(p):
    p.add_argument("--dt", type=float, default=SimulationConfig.dt, help="time step, s")
    p.add_argument("--tstop", type=float, default=SimulationConfig.t_stop, help="run length, s")
    p.add_argument("--mc", type=_on_off, default=False, metavar="on|off",
                   help="momentary cessation at the converter zerox")
    p.add_argument("--dist-pv", type=_on_off, default=False, metavar="on|off",
                   help="treat every IBR as distribution-connected PV")
    p.add_argument("--motor-stall", type=_on_off, default=False, metavar="on|off",
                   help="enable induction-motor stall in composite loads")


def _flags(args):
    return SensitivityFlags(args.mc, args.dist_pv, args.motor_stall)


def _sim_config(args, flags=None):
    try:
        return SimulationConfig(dt=args.dt, t_stop=args.tstop,
                                flags=_flags(args) if flags is None else flags)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _load_case(path, manifest=None):
    raw = _read(path)
    if manifest is not None:
        manifest.add_input("case", path, raw)
    try:
        case = load_case(path)
    except CaseSyntaxError as exc:
        raise InputError(f"{path}: {exc}") from None
    except CaseSchemaError as exc:
        raise InputError(f"{path}: {exc}") from None
    except CaseError as exc:
        raise InputError(f"{path}: {exc}") from None
    report = validate_case(case)
    if report.errors:
        raise InputError(f"{path}: invalid case\n{report}")
    return case


def _load_contingencies(path, case, t_stop, manifest=None):
    raw = _read(path)
    if manifest is not None:
        manifest.add_input("contingencies", path, raw)
    try:
        cons = parse_contingency_set(raw.decode(), t_stop=t_stop)
        check_contingency_targets(case, cons)
    except CaseError as exc:
        raise InputError(f"{path}: {exc}") from None
    return cons


def _config_echo(sim: SimulationConfig, crit: CriteriaConfig | None = None, **extra):
    out = {"dt": sim.dt, "t_stop": sim.t_stop, "network_tol": sim.network_tol,
           "flags": sim.flags.as_dict()}
    if crit is not None:
        out["criteria"] = asdict(crit)
    out.update(extra)
    return out


def _init_states(case):
    try:
        pf = solve_powerflow(case)
    except PowerFlowError as exc:
        raise NumericalError(f"power flow did not converge: {exc}") from None
    try:
        return initialize_dynamic_states(case, pf)
    except InitializationError as exc:
        raise NumericalError(f"cannot initialize dynamics: {exc}") from None


# ---------------------------------------------------------------------------
# Plots


def trace_plots(case, result, label, v_init=None, crit: CriteriaConfig = CriteriaConfig()):
    """Voltage and frequency SVGs for one run, with the criteria as reference lines."""
    vm = result.vm
    if v_init is None:
        v_init = vm[0]
    study = case.study_buses()
    cols = [k for k, b in enumerate(result.bus_ids) if b in study] or list(range(len(result.bus_ids)))
    v_ref = float(np.min(v_init[cols]))
    volt = {f"bus {result.bus_ids[k]}": vm[:, k] for k in cols}
    freq = {f"bus {result.bus_ids[k]}": result.freq[:, k] for k in cols}
    v_svg = emit_svg_timeseries(result.time, volt, PlotStyle(
        title=f"Voltage, {label}", ylabel="voltage (pu)",
        refs=((crit.dip80_fraction * v_ref, f"{crit.dip80_fraction:g} Vinit"),
              (crit.dip70_fraction * v_ref, f"{crit.dip70_fraction:g} Vinit"))))
    f_svg = emit_svg_timeseries(result.time, freq, PlotStyle(
        title=f"Frequency, {label}", ylabel="frequency (Hz)",
        refs=((crit.freq_floor, f"{crit.freq_floor:g} Hz"),)))
    return v_svg, f_svg


def scan_bars(profile, title):
    from .criteria import CATEGORIES
    labels = list(profile.contingencies)
    values = {cat: [profile.count(c, cat) for c in labels] for cat in CATEGORIES}
    return emit_svg_bars(labels, values, BarStyle(title=title, groups=CATEGORIES))


# ---------------------------------------------------------------------------
# Commands


def cmd_powerflow(args):
    manifest = RunManifest(args.out, "powerflow", {})
    case = _load_case(args.case, manifest)
    manifest.write()
    w = Writer(args.out)
    try:
        pf = solve_powerflow(case)
    except PowerFlowError as exc:
        print(f"power flow did not converge: {exc}", file=sys.stderr)
        manifest.finalize("failed", w.written)
        return EXIT_NUMERIC
    w.text("powerflow.csv", pf.to_csv())
    print(f"converged in {pf.iterations} iterations, max mismatch {pf.max_mismatch:.3e} pu, "
          f"slack {pf.slack_p_mw:.1f} MW")
    manifest.finalize("completed", w.written)
    return EXIT_OK


def cmd_simulate(args):
    sim = _sim_config(args)
    crit = CriteriaConfig()
    sim = replace(sim, record=tuple(args.record))
    manifest = RunManifest(args.out, "simulate", _config_echo(sim, crit))
    case = _load_case(args.case, manifest)
    contingency = None
    if args.contingencies:
        cons = {c.id: c for c in _load_contingencies(args.contingencies, case, sim.t_stop, manifest)}
        if args.id is None:
            raise InputError("--id is required with --contingencies")
        if args.id not in cons:
            raise InputError(f"no contingency {args.id!r} in {args.contingencies}")
        contingency = cons[args.id]
    manifest.write()
    init = _init_states(case)
    result = run_simulation(case, init, contingency, sim)
    try:
        csv = result.to_csv()
    except KeyError as exc:
        raise InputError(exc.args[0]) from None
    w = Writer(args.out)
    w.text("timeseries.csv", csv)
    label = contingency.id if contingency else "no event"
    v_svg, f_svg = trace_plots(case, result, label)
    w.text("voltage.svg", v_svg)
    w.text("frequency.svg", f_svg)
    if contingency is not None:
        w.text("violations.json", violations_json(evaluate_result(case, contingency, result, crit)))
    status = "completed" if result.completed else "diverged"
    print(f"{label}: {status}" + ("" if result.completed else f" at t={result.diverged_at:.4f} s "
                                   f"({result.message})"))
    manifest.finalize(status, w.written)
    return EXIT_OK if result.completed else EXIT_VIOLATIONS


def _write_scan(w, scan, prefix=""):
    w.text(f"{prefix}profile.json", scan.profile.to_json())
    w.text(f"{prefix}violations.json", violations_json(scan.violations))
    for o in scan.outcomes:
        body = json.loads(violations_json(o.violations))
        body["diverged"] = o.diverged
        w.text(f"{prefix}violations/{o.contingency}.json", _dump(body))
    w.text(f"{prefix}scan_bars.svg", scan_bars(scan.profile, f"Violations per contingency "
                                                            f"({scan.profile.flags.label})"))


def cmd_scan(args):
    sim = _sim_config(args)
    crit = CriteriaConfig()
    manifest = RunManifest(args.out, "scan", _config_echo(sim, crit))
    case = _load_case(args.case, manifest)
    cons = _load_contingencies(args.contingencies, case, sim.t_stop, manifest)
    manifest.write()
    init = _init_states(case)
    scan = run_scan(case, cons, sim, crit, jobs=args.jobs, init=init)
    w = Writer(args.out)
    _write_scan(w, scan)
    n = len(scan.violations)
    print(f"{len(cons)} contingencies, {n} violations, {len(scan.diverged)} diverged")
    for cid in scan.diverged:
        print(f"  diverged: {cid}: {scan.profile.divergences[cid]}", file=sys.stderr)
    status = "diverged" if scan.diverged else "completed"
    manifest.finalize(status, w.written)
    return EXIT_VIOLATIONS if scan.diverged else EXIT_OK


def _worst_contingency(res):
    """Contingency to plot: the first breach at the rejected level, else the most violated."""
    for entry in res.log[::-1]:
        if not entry["acceptable"] and entry.get("first_breach"):
            return entry["first_breach"]
    prof = res.acceptable_profile
    if prof is None or not prof.contingencies:
        return None
    tally = {c: sum(n for (cc, _), n in prof.counts.items() if cc == c) for c in prof.contingencies}
    return max(sorted(tally), key=lambda c: tally[c])


def cmd_threshold(args):
    sim = _sim_config(args)
    crit = CriteriaConfig()
    echo = _config_echo(sim, crit, tol=args.tol, overflow_tol=args.overflow_tol,
                        p_lo=args.p_lo, p_hi=args.p_hi, sensitivity=args.sensitivity)
    manifest = RunManifest(args.out, "threshold", echo)
    case = _load_case(args.case, manifest)
    cons = _load_contingencies(args.contingencies, case, sim.t_stop, manifest)
    manifest.add_input("plan", args.plan, _read(args.plan))
    try:
        plan = load_plan(args.plan)
        plan.validate(case)
    except (PenetrationError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"{args.plan}: {exc}") from None
    p_lo = measure_penetration(case) if args.p_lo is None else args.p_lo
    p_hi = max_penetration(case, plan) if args.p_hi is None else args.p_hi
    try:
        base_cfg = ThresholdConfig(p_lo, p_hi, tuple(cons), args.tol, crit, sim.flags,
                                   args.overflow_tol, sim, args.jobs)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    manifest.write()
    if args.sensitivity == "flags":
        runs = {sim.flags.label: base_cfg}
    elif args.sensitivity == "all":
        runs = {name: replace(base_cfg, flags=f) for name, f in SENSITIVITIES.items()}
    else:
        runs = {args.sensitivity: replace(base_cfg, flags=SENSITIVITIES[args.sensitivity])}

    w = Writer(args.out)
    report = {"schema_version": 1, "bracket": [p_lo, p_hi], "tol": args.tol, "thresholds": {}}
    status, code = "completed", EXIT_OK
    for name, cfg in runs.items():
        try:
            res = find_threshold(case, plan, cfg)
        except BracketError as exc:
            w.text(f"{name}/bracket_diff.json", diff_json(exc.breaches))
            print(f"{name}: {exc}", file=sys.stderr)
            for b in exc.breaches:
                print(f"  {json.dumps(b, sort_keys=True)}", file=sys.stderr)
            report["thresholds"][name] = {"error": str(exc), "diff": f"{name}/bracket_diff.json"}
            status, code = "bracket_invalid", EXIT_VIOLATIONS
            continue
        entry = res.to_dict()
        probes = []
        for k, (item, prof) in enumerate(zip(res.log, res.profiles)):
            if prof is None:
                probes.append(None)
                continue
            probes.append(str(w.text(f"{name}/probe_{k:02d}.json", prof.to_json())
                              .relative_to(args.out)))
        entry["probe_reports"] = probes
        worst = _worst_contingency(res)
        if worst is not None:
            at_p = case if abs(res.p_star - measure_penetration(case)) <= 1e-12 else \
                apply_penetration(case, res.p_star, plan)
            result = run_simulation(at_p, _init_states(at_p), {c.id: c for c in cons}[worst],
                                    cfg.sim_config())
            label = f"{worst} at p={res.p_star:.4f} ({name})"
            v_svg, f_svg = trace_plots(at_p, result, label, crit=crit)
            entry["trace_contingency"] = worst
            entry["trace_svgs"] = [str(w.text(f"{name}/voltage_{worst}.svg", v_svg).relative_to(args.out)),
                                   str(w.text(f"{name}/frequency_{worst}.svg", f_svg).relative_to(args.out))]
        report["thresholds"][name] = entry
        print(f"{name}: p_star = {res.p_star:.4f} after {res.bisection_evaluations} bisection "
              f"evaluations")
    w.text("threshold.json", _dump(report))
    manifest.finalize(status, w.written)
    return code


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="ibrpen", description=__doc__)
    ap.add_argument("--version", action="version", version=f"ibrpen {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("powerflow", help="solve the power flow and write the bus solution")
    p.add_argument("case", type=Path)
    _add_common(p)
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("simulate", help="run one contingency (or none) and dump time series")
    p.add_argument("case", type=Path)
    p.add_argument("--contingencies", type=Path)
    p.add_argument("--id", help="contingency id within the contingency file")
    p.add_argument("--record", nargs="+", default=(), metavar="CHANNEL",
                   help="CSV channels, e.g. bus.7.vm dev.G1.omega (default: all)")
    _add_common(p)
    _add_sim(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scan", help="run every contingency and report violations")
    p.add_argument("case", type=Path)
    p.add_argument("contingencies", type=Path)
    _add_common(p, jobs=True)
    _add_sim(p)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("threshold", help="bisect the study-area IBR share to the acceptability edge")
    p.add_argument("case", type=Path)
    p.add_argument("contingencies", type=Path)
    p.add_argument("--plan", type=Path, required=True, help="penetration plan JSON")
    p.add_argument("--p-lo", type=float, help="lower bracket (default: the case as authored)")
    p.add_argument("--p-hi", type=float, help="upper bracket (default: every plan unit retired)")
    p.add_argument("--tol", type=float, default=0.01)
    p.add_argument("--overflow-tol", type=float, default=0.5, help="MVA")
    p.add_argument("--sensitivity", default="flags",
                   choices=["flags", "all", *SENSITIVITIES],
                   help="'flags' uses --mc/--dist-pv/--motor-stall; 'all' runs the four-way suite")
    _add_common(p, jobs=True)
    _add_sim(p)
    p.set_defaults(func=cmd_threshold)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PenetrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
