"""Regenerate the bundled cases: the two-area case with its contingency set and
penetration plan, and the two-bus case whose power flow has a closed form.

Two-area topology and line data follow the classic four-machine two-area benchmark;
dispatch, loads and the converter plant are chosen so the study area starts
near 11% IBR output.
"""
import argparse
import json
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "ibrpen" / "data"

# per-km line constants on 100 MVA / 230 kV
R_KM, X_KM, B_KM = 1e-4, 1e-3, 1.75e-3
TIE_KM = 110
KA = 50.0
DAMP = 5.0
TQ0 = 0.4
G5_MW, G5_MVA = 330.0, 350.0
SLACK_MW = 637.3


def line(bid, f, t, km):
    return {"id": bid, "from_bus": f, "to_bus": t, "r": R_KM * km, "x": X_KM * km,
            "b_shunt": B_KM * km, "rating": 1200.0}


def xfmr(bid, f, t, x=0.15 / 9):
    return {"id": bid, "from_bus": f, "to_bus": t, "x": x, "rating": 1000.0}


def machine(mid, bus, fuel, p, H, mva=900.0):
    return {"id": mid, "bus": bus, "mva_base": mva, "fuel": fuel, "p_out": p, "H": H,
            "D": DAMP, "xd": 1.8, "xq": 1.7, "xd_p": 0.3, "xq_p": 0.55, "Td0_p": 8.0,
            "Tq0_p": TQ0, "governor": {"R": 0.05, "Tg": 0.5, "p_max": 1.0},
            "exciter": {"Ka": KA, "Ta": 0.05, "Efd_max": 6.0, "Efd_min": -4.0}}


ZIP_P = {"z": 0.0, "i": 0.1, "p": 0.9}
ZIP_Q = {"z": 0.5, "i": 0.0, "p": 0.5}


def load(lid, bus, p, q, motor=0.1):
    return {"id": lid, "bus": bus, "p": p, "q": q, "zip_p": dict(ZIP_P), "zip_q": dict(ZIP_Q),
            "motor_fraction": motor}


def shunt(lid, bus, q):
    return {"id": lid, "bus": bus, "p": 0.0, "q": q,
            "zip_p": {"z": 1.0, "i": 0.0, "p": 0.0}, "zip_q": {"z": 1.0, "i": 0.0, "p": 0.0}}


def build_case(load7=(1550.0, 100.0, -300.0), load9=(1617.0, 100.0, -300.0)):
    buses = []
    for bid, kv, typ, area, vs in [
        ("1", 20.0, "PV", "A1", 1.03), ("2", 20.0, "PV", "A1", 1.01),
        ("3", 20.0, "slack", "A2", 1.03), ("4", 20.0, "PV", "A2", 1.01),
    ]:
        buses.append({"id": bid, "base_kv": kv, "type": typ, "area_id": area, "v_setpoint": vs})
    for bid, area in [("5", "A1"), ("6", "A1"), ("7", "A1"), ("8", "A2"), ("9", "A2"),
                      ("10", "A2"), ("11", "A2")]:
        buses.append({"id": bid, "base_kv": 230.0, "type": "PQ", "area_id": area})
    branches = [
        xfmr("T1-5", "1", "5"), xfmr("T2-6", "2", "6"), xfmr("T3-11", "3", "11"),
        xfmr("T4-10", "4", "10"),
        line("L5-6", "5", "6", 25), line("L6-7", "6", "7", 10),
        line("L7-8a", "7", "8", TIE_KM), line("L7-8b", "7", "8", TIE_KM),
        line("L8-9a", "8", "9", TIE_KM), line("L8-9b", "8", "9", TIE_KM),
        line("L9-10", "9", "10", 10), line("L10-11", "10", "11", 25),
    ]
    machines = [
        machine("G1", "1", "hydro", 700.0, 6.5),
        machine("G2", "2", "coal", 350.0, 6.5, mva=450.0),
        machine("G6", "2", "gas", 350.0, 6.5, mva=450.0),
        machine("G3", "3", "hydro", SLACK_MW, 6.175),  # base-case solved slack output
        machine("G4", "4", "gas", 700.0, 6.175),
        machine("G5", "4", "gas", G5_MW, 4.0, mva=G5_MVA),
    ]
    ibr = [{"id": "PV1", "bus": "6", "mva_base": 200.0, "p_out": 175.0, "q_out": 0.0}]
    loads = [
        load("LD7", "7", load7[0], load7[1]), shunt("CAP7", "7", load7[2]),
        load("LD9", "9", load9[0], load9[1]), shunt("CAP9", "9", load9[2]),
    ]
    areas = [{"id": "A1", "name": "study", "study_area": True}, {"id": "A2", "name": "neighbor"}]
    interfaces = [{"id": "TIE", "name": "A1-A2 corridor", "limit": 500.0,
                   "members": [{"branch_id": "L7-8a"}, {"branch_id": "L7-8b"}]}]
    return {
        "system": {"schema_version": 1, "system_mva_base": 100.0, "nominal_frequency": 60.0},
        "buses": buses, "branches": branches, "machines": machines, "ibr_plants": ibr,
        "loads": loads, "areas": areas, "interfaces": interfaces,
    }


T_FAULT = 1.0
T_CLEAR = 1.05  # three cycles


def fault(cid, label, bus, trip=None, y=None):
    apply = {"t": T_FAULT, "kind": "bus_fault_apply", "target": bus}
    if y is not None:
        apply["fault_admittance"] = list(y)
    events = [apply, {"t": T_CLEAR, "kind": "bus_fault_clear", "target": bus}]
    if trip:
        events.append({"t": T_CLEAR, "kind": "branch_trip", "target": trip})
    return {"id": cid, "label": label, "events": events}


def build_contingencies():
    return [
        fault("F07-L78a", "bus 7 fault, tie circuit a opened", "7", "L7-8a"),
        fault("F08-L89a", "bus 8 fault, circuit 8-9a opened", "8", "L8-9a"),
        fault("F09-L89b", "bus 9 fault, circuit 8-9b opened", "9", "L8-9b"),
        fault("F06", "bus 6 fault", "6"),
        fault("F10-Z", "bus 10 impedance fault", "10", y=(0.0, -20.0)),
        fault("F11-Z", "bus 11 impedance fault", "11", y=(0.0, -20.0)),
        {"id": "G5-TRIP", "label": "loss of G5", "events": [
            {"t": T_FAULT, "kind": "machine_trip", "target": "G5"}]},
        {"id": "PV1-TRIP", "label": "loss of PV1", "events": [
            {"t": T_FAULT, "kind": "ibr_trip", "target": "PV1"}]},
    ]


def build_plan():
    return {
        "retirement_order": ["G2", "G6"],
        "additions": [
            {"id": "PV2", "bus": "6", "max_mw": 400.0},
            {"id": "PV3", "bus": "7", "max_mw": 400.0},
        ],
        "dispatch_rule": "proportional",
    }


def build_twobus():
    """Slack at 1.0 pu feeding 100 MW over a lossless x = 0.1 pu line."""
    return {
        "system": {"schema_version": 1, "system_mva_base": 100.0, "nominal_frequency": 60.0},
        "buses": [
            {"id": "1", "base_kv": 230.0, "type": "slack", "area_id": "A1", "v_setpoint": 1.0},
            {"id": "2", "base_kv": 230.0, "type": "PQ", "area_id": "A1"},
        ],
        "branches": [{"id": "L1-2", "from_bus": "1", "to_bus": "2", "x": 0.1, "rating": 300.0}],
        "machines": [machine("G1", "1", "hydro", 100.0, 5.0, mva=200.0)],
        "loads": [{"id": "LD2", "bus": "2", "p": 100.0, "q": 0.0,
                   "zip_p": {"z": 0.0, "i": 0.0, "p": 1.0}, "zip_q": {"z": 0.0, "i": 0.0, "p": 1.0}}],
        "areas": [{"id": "A1", "name": "only", "study_area": True}],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name, obj in [("twoarea.json", build_case()),
                      ("twoarea_contingencies.json", build_contingencies()),
                      ("twoarea_plan.json", build_plan()),
                      ("twobus.json", build_twobus())]:
        (args.out / name).write_text(json.dumps(obj, indent=2) + "\n")


if __name__ == "__main__":
    main()
