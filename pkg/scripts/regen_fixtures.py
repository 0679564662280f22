"""Regenerate the frozen regression fixtures under tests/fixtures.

Run after a deliberate modelling change, inspect the diff, and commit it:

    python scripts/regen_fixtures.py            # scans and traces (~1 min)
    python scripts/regen_fixtures.py --suite    # also the four thresholds (~6 min)
"""
import argparse
import json
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from ibrpen.case import load_case, load_contingencies
from ibrpen.powerflow import initialize_dynamic_states, solve_powerflow
from ibrpen.scan import run_scan
from ibrpen.simulator import SimulationConfig, run_simulation
from ibrpen.threshold import (
    SENSITIVITIES, ThresholdConfig, apply_penetration, load_plan, max_penetration, measure_penetration,
    run_sensitivity_suite,
)

DATA = Path(resources.files("ibrpen") / "data")
OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def _write(name, obj):
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    print(f"wrote {OUT / name}")


def fault_summary(case, cons):
    """Bus 7 voltage around the F07 fault, sampled at fixed instants."""
    cont = {c.id: c for c in cons}["F07-L78a"]
    res = run_simulation(case, initialize_dynamic_states(case, solve_powerflow(case)), cont,
                         SimulationConfig(t_stop=5.0))
    k7 = res.bus_ids.index("7")
    dt = res.time[1]
    samples = {f"{t:g}": float(res.vm[int(round(t / dt)), k7]) for t in (0.5, 1.02, 1.1, 1.5, 2.0, 5.0)}
    return {"contingency": cont.id, "bus": "7", "dt": dt, "vm": samples,
            "vm_min": float(res.vm[:, k7].min()), "tie_mva_max": float(res.iface_mva[:, 0].max())}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--suite", action="store_true", help="also rerun the sensitivity suite")
    args = ap.parse_args()

    case = load_case(DATA / "twoarea.json")
    cons = load_contingencies(DATA / "twoarea_contingencies.json")
    plan = load_plan(DATA / "twoarea_plan.json")

    for name in ("none", "motor_stall"):
        scan = run_scan(case, cons, SimulationConfig(flags=SENSITIVITIES[name]))
        _write(f"base_profile_{name}.json", scan.profile.to_dict())

    at_max = apply_penetration(case, max_penetration(case, plan), plan)
    g5 = [c for c in cons if c.id == "G5-TRIP"]
    _write("max_penetration_G5-TRIP.json", run_scan(at_max, g5).profile.to_dict())

    _write("fault_F07.json", fault_summary(case, cons))

    if args.suite:
        cfg = ThresholdConfig(measure_penetration(case), max_penetration(case, plan), tuple(cons))
        suite = run_sensitivity_suite(case, plan, cfg)
        _write("suite_thresholds.json", {
            "bracket": [cfg.p_lo, cfg.p_hi], "tol": cfg.tol,
            "p_star": {k: r.p_star for k, r in suite.items()},
            "bisection_evaluations": {k: r.bisection_evaluations for k, r in suite.items()},
        })


if __name__ == "__main__":
    main()
