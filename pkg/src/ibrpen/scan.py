"""Contingency scans: simulate every contingency and check it against the criteria."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .criteria import ContingencyOutcome, CriteriaConfig, build_profile, evaluate_result
from .powerflow import initialize_dynamic_states, solve_powerflow
from .simulator import SimulationConfig, run_simulation


@dataclass
class ScanResult:
    outcomes: list  # ContingencyOutcome, ordered by contingency id
    results: dict  # contingency id -> SimulationResult (only when kept)
    profile: object

    @property
    def violations(self):
        return [v for o in self.outcomes for v in o.violations]

    @property
    def diverged(self):
        return [o.contingency for o in self.outcomes if o.diverged is not None]


def _run_one(args):
    case, init, contingency, sim_cfg, crit_cfg, keep = args
    result = run_simulation(case, init, contingency, sim_cfg)
    violations = evaluate_result(case, contingency, result, crit_cfg)
    diverged = None if result.completed else (result.message or "diverged")
    outcome = ContingencyOutcome(contingency.id, violations, diverged)
    return outcome, (result if keep else None)


def run_scan(case, contingencies, sim_cfg: SimulationConfig = SimulationConfig(),
             crit_cfg: CriteriaConfig = CriteriaConfig(), jobs=1, keep_results=False, init=None):
    """Simulate each contingency from the case's power-flow equilibrium.

    Work is spread over ``jobs`` processes; outputs are merged in contingency-id
    order so nothing depends on scheduling.
    """
    if init is None:
        init = initialize_dynamic_states(case, solve_powerflow(case))
    ordered = sorted(contingencies, key=lambda c: c.id)
    tasks = [(case, init, c, sim_cfg, crit_cfg, keep_results) for c in ordered]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            done = list(pool.map(_run_one, tasks))
    else:
        done = [_run_one(t) for t in tasks]
    outcomes = [o for o, _ in done]
    results = {o.contingency: r for o, r in done if r is not None}
    return ScanResult(outcomes, results, build_profile(outcomes, sim_cfg.flags))
