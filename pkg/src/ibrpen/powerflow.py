"""Admittance matrix, Newton-Raphson power flow and dynamic initialization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import devices
from .case import CaseError, SystemCase


class PowerFlowError(RuntimeError):
    def __init__(self, msg, mismatch=float("nan"), iterations=0):
        super().__init__(msg)
        self.mismatch = mismatch
        self.iterations = iterations


class InitializationError(RuntimeError):
    pass


@dataclass
class AdmittanceMatrix:
    Y: sp.csr_matrix
    bus_ids: list

    def dense(self):
        return self.Y.toarray()

    def __getitem__(self, key):
        i, j = key
        idx = {b: k for k, b in enumerate(self.bus_ids)}
        return complex(self.Y[idx[i], idx[j]])


def branch_stamp(br):
    """Return (yff, yft, ytf, ytt) of a pi-model branch with an off-nominal tap."""
    ys = 1.0 / complex(br.r, br.x)
    ysh = 0.5j * br.b_shunt
    t = br.tap
    return (ys + ysh) / (t * t), -ys / t, -ys / t, ys + ysh


def branch_in_service(case, overrides=None):
    overrides = overrides or {}
    return {br.id: overrides.get(br.id, br.in_service) for br in case.branches}


def build_admittance(case: SystemCase, status_overrides=None):
    """Bus admittance matrix from branch pi-models; out-of-service branches excluded.

    ``status_overrides`` maps branch id to an in-service flag.
    """
    idx = case.bus_index()
    n = len(case.buses)
    status = branch_in_service(case, status_overrides)
    rows, cols, vals = [], [], []
    connected = np.zeros(n, dtype=bool)
    for br in case.branches:
        if not status[br.id]:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = branch_stamp(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
        connected[f] = connected[t] = True
    if n > 1 and not connected.all():
        isolated = [case.buses[k].id for k in np.flatnonzero(~connected)]
        raise CaseError(f"isolated bus(es) with no in-service branch: {', '.join(isolated)}")
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    return AdmittanceMatrix(Y, [b.id for b in case.buses])


@dataclass
class PowerFlowSolution:
    bus_ids: list
    vm: np.ndarray
    va: np.ndarray
    s_inj: np.ndarray  # net bus injection, system pu
    machine_s: dict  # machine id -> complex output, system pu
    ibr_s: dict
    slack_p_mw: float
    slack_absorption_mw: float
    iterations: int
    max_mismatch: float
    system_mva_base: float = 100.0
    bus_type: list = field(default_factory=list)

    @property
    def v(self):
        return self.vm * np.exp(1j * self.va)

    def to_csv(self):
        lines = ["bus,vm,va,p_inj,q_inj"]
        base = self.system_mva_base
        for k, b in enumerate(self.bus_ids):
            s = self.s_inj[k] * base
            lines.append(f"{b},{self.vm[k]:.8f},{self.va[k]:.8f},{s.real:.6f},{s.imag:.6f}")
        return "\n".join(lines) + "\n"


def effective_bus_types(case):
    """Bus types after dropping PV status on buses without an in-service machine."""
    has_machine = {m.bus for m in case.machines if m.in_service}
    out = []
    for b in case.buses:
        if b.type == "PV" and b.id not in has_machine:
            out.append("PQ")
        else:
            out.append(b.type)
    return out


def scheduled_injection(case):
    idx = case.bus_index()
    base = case.system_mva_base
    s = np.zeros(len(case.buses), dtype=complex)
    for m in case.machines:
        if m.in_service:
            s[idx[m.bus]] += complex(m.p_out, m.q_out) / base
    for p in case.ibr_plants:
        if p.in_service:
            s[idx[p.bus]] += complex(p.p_out, p.q_out) / base
    for ld in case.loads:
        s[idx[ld.bus]] -= complex(ld.p, ld.q) / base
    return s


def _dsbus_dv(Y, V):
    ibus = Y @ V
    diag_v = np.diag(V)
    diag_i = np.diag(ibus)
    diag_vn = np.diag(V / np.abs(V))
    ds_dvm = diag_v @ np.conj(Y @ diag_vn) + np.conj(diag_i) @ diag_vn
    ds_dva = 1j * diag_v @ np.conj(diag_i - Y @ diag_v)
    return ds_dvm, ds_dva


def solve_powerflow(case: SystemCase, tol=1e-8, max_iter=30, status_overrides=None):
    """Full Newton-Raphson in polar coordinates from a flat start."""
    Y = build_admittance(case, status_overrides).dense()
    types = effective_bus_types(case)
    ref = [k for k, t in enumerate(types) if t == "slack"]
    if len(ref) != 1:
        raise CaseError(f"power flow needs exactly one slack bus, found {len(ref)}")
    pv = [k for k, t in enumerate(types) if t == "PV"]
    pq = [k for k, t in enumerate(types) if t == "PQ"]
    pvpq = pv + pq
    sbus = scheduled_injection(case)

    vm = np.ones(len(case.buses))
    for k in ref + pv:
        vm[k] = case.buses[k].v_setpoint
    va = np.zeros(len(case.buses))
    V = vm * np.exp(1j * va)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - sbus
        return np.r_[mis.real[pvpq], mis.imag[pq]]

    F = mismatch(V)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                                 f"(max mismatch {norm:.3e} pu)", norm, it)
        ds_dvm, ds_dva = _dsbus_dv(Y, V)
        J = np.block([
            [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
            [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular Jacobian", norm, it) from None
        npv = len(pvpq)
        va[pvpq] += dx[:npv]
        vm[pq] += dx[npv:]
        V = vm * np.exp(1j * va)
        it += 1
        F = mismatch(V)
        norm = np.max(np.abs(F))
        if not np.isfinite(norm):
            raise PowerFlowError("power flow diverged (non-finite mismatch)", norm, it)

    s_inj = V * np.conj(Y @ V)
    return _package_solution(case, V, s_inj, types, it, norm)


def _package_solution(case, V, s_inj, types, it, norm):
    idx = case.bus_index()
    base = case.system_mva_base
    n = len(case.buses)
    # generation each bus must supply from machines
    fixed = np.zeros(n, dtype=complex)
    for p in case.ibr_plants:
        if p.in_service:
            fixed[idx[p.bus]] += complex(p.p_out, p.q_out) / base
    for ld in case.loads:
        fixed[idx[ld.bus]] -= complex(ld.p, ld.q) / base
    machine_need = s_inj - fixed

    by_bus = {}
    for m in case.machines:
        if m.in_service:
            by_bus.setdefault(m.bus, []).append(m)
    machine_s = {}
    slack_p = 0.0
    slack_sched = 0.0
    for bus, ms in by_bus.items():
        k = idx[bus]
        need = machine_need[k]
        total_mva = sum(m.mva_base for m in ms)
        for m in ms:
            share = m.mva_base / total_mva
            if types[k] == "slack":
                s = need * share
                slack_p += s.real * base
                slack_sched += m.p_out
            elif types[k] == "PV":
                s = complex(m.p_out / base, need.imag * share)
            else:
                s = complex(m.p_out, m.q_out) / base
            machine_s[m.id] = s
    ibr_s = {p.id: complex(p.p_out, p.q_out) / base for p in case.ibr_plants if p.in_service}
    return PowerFlowSolution(
        bus_ids=[b.id for b in case.buses],
        vm=np.abs(V),
        va=np.angle(V),
        s_inj=s_inj,
        machine_s=machine_s,
        ibr_s=ibr_s,
        slack_p_mw=slack_p,
        slack_absorption_mw=slack_p - slack_sched,
        iterations=it,
        max_mismatch=float(norm),
        system_mva_base=base,
        bus_type=types,
    )


@dataclass
class DynamicState:
    """Device states and bus voltages at one time point."""

    t: float
    v: np.ndarray
    machines: dict
    ibrs: dict
    loads: dict


def initialize_dynamic_states(case: SystemCase, pf: PowerFlowSolution):
    """Put every device at the equilibrium implied by the power-flow solution."""
    idx = case.bus_index()
    V = pf.v
    base = case.system_mva_base
    machines, ibrs, loads = {}, {}, {}
    try:
        for m in case.machines:
            if m.in_service:
                machines[m.id] = devices.init_machine(m, V[idx[m.bus]], pf.machine_s[m.id], base)
        for p in case.ibr_plants:
            if p.in_service:
                ibrs[p.id] = devices.init_ibr(p, V[idx[p.bus]])
        for ld in case.loads:
            loads[ld.id] = devices.init_load(ld, V[idx[ld.bus]], base)
    except ValueError as exc:
        raise InitializationError(str(exc)) from None
    return DynamicState(0.0, V.copy(), machines, ibrs, loads)
