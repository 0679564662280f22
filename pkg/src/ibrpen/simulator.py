"""Fixed-step time-domain simulation.

Partitioned explicit scheme: device ODEs advance by a midpoint step with
bus voltages held, then the network algebraics are re-solved by fixed-point
iteration on ``V = Y^-1 I(V)``. Machines appear in ``Y`` through a Norton
admittance, and the iteration matrix is corrected with each bus's 2x2
injection Jacobian so that constant-power loads (whose current depends on
conj(V)) do not slow it down.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import devices
from .case import Contingency, SystemCase
from .devices import DeviceDivergence, SensitivityFlags
from .powerflow import DynamicState, branch_stamp, build_admittance

NEWTON_BUDGET = 3  # fallback Newton may use this many times network_max_iter

log = logging.getLogger(__name__)


class NetworkNonConvergence(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(f"network iteration did not converge after {iterations} iterations "
                         f"(last max |dV| {residual:.3e} pu)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 1.0 / 240.0
    t_stop: float = 20.0
    network_tol: float = 1e-6
    network_max_iter: int = 20
    freq_filter_T: float = 0.05
    record: tuple = ()  # channels for the CSV dump; empty means every channel
    flags: SensitivityFlags = field(default_factory=SensitivityFlags)

    def __post_init__(self):
        if not 0 < self.dt <= 0.01:
            raise ValueError(f"dt must be in (0, 0.01], got {self.dt}")

    @property
    def n_steps(self):
        return int(round(self.t_stop / self.dt))


@dataclass
class SimulationResult:
    time: np.ndarray
    bus_ids: list
    v: np.ndarray  # complex bus voltages, shape (n_t, n_bus)
    freq: np.ndarray  # Hz, shape (n_t, n_bus)
    coi_freq: np.ndarray  # inertia-weighted machine frequency, Hz
    iface_ids: list
    iface_mw: np.ndarray
    iface_mva: np.ndarray
    device: dict  # "dev.<id>.<state>" -> series
    status: str = "completed"
    diverged_at: float | None = None
    diverged_device: str | None = None
    message: str = ""
    record: tuple = ()

    @property
    def vm(self):
        return np.abs(self.v)

    @property
    def completed(self):
        return self.status == "completed"

    def channels(self):
        out = {}
        vm = self.vm
        for k, b in enumerate(self.bus_ids):
            out[f"bus.{b}.vm"] = vm[:, k]
        for k, b in enumerate(self.bus_ids):
            out[f"bus.{b}.freq"] = self.freq[:, k]
        for k, i in enumerate(self.iface_ids):
            out[f"iface.{i}.mw"] = self.iface_mw[:, k]
            out[f"iface.{i}.mva"] = self.iface_mva[:, k]
        out.update(self.device)
        return out

    def to_csv(self, channels=None):
        ch = self.channels()
        if channels is None:
            channels = self.record or ch
        names = list(channels)
        unknown = [n for n in names if n not in ch]
        if unknown:
            raise KeyError(f"unknown channel(s): {', '.join(unknown)}")
        cols = [self.time] + [ch[n] for n in names]
        lines = [",".join(["time_s"] + names)]
        for row in zip(*cols):
            lines.append(",".join(f"{x:.10g}" for x in row))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Network state and events


@dataclass(frozen=True)
class NetworkState:
    branch_status: dict
    faults: dict  # bus id -> fault admittance
    tripped_machines: frozenset = frozenset()
    tripped_ibrs: frozenset = frozenset()

    @classmethod
    def initial(cls, case):
        return cls({br.id: br.in_service for br in case.branches}, {})


def apply_event(net: NetworkState, event):
    """Return the network state after ``event``; tripping a dead element is a no-op."""
    kind, target = event.kind, event.target
    if kind == "bus_fault_apply":
        faults = dict(net.faults)
        faults[target] = event.fault_admittance
        return replace(net, faults=faults)
    if kind == "bus_fault_clear":
        faults = dict(net.faults)
        faults.pop(target, None)
        return replace(net, faults=faults)
    if kind == "branch_trip":
        if not net.branch_status.get(target, False):
            log.warning("branch %s already out of service; trip ignored", target)
            return net
        status = dict(net.branch_status)
        status[target] = False
        return replace(net, branch_status=status)
    if kind == "machine_trip":
        if target in net.tripped_machines:
            log.warning("machine %s already tripped; event ignored", target)
            return net
        return replace(net, tripped_machines=net.tripped_machines | {target})
    if kind == "ibr_trip":
        if target in net.tripped_ibrs:
            log.warning("IBR %s already tripped; event ignored", target)
            return net
        return replace(net, tripped_ibrs=net.tripped_ibrs | {target})
    raise ValueError(f"unknown event kind {kind!r}")


def network_admittance(case, net: NetworkState):
    """Branch Y-bus for ``net`` including fault shunts (dense)."""
    Y = build_admittance(case, net.branch_status).dense()
    idx = case.bus_index()
    for bus, y in net.faults.items():
        Y[idx[bus], idx[bus]] += y
    return Y


def _realify(Y):
    G, B = Y.real, Y.imag
    return np.block([[G, -B], [B, G]])


def _iteration_matrix(Y, blocks):
    n = Y.shape[0]
    M = _realify(Y)
    if blocks is not None:
        idx = np.arange(n)
        M[idx, idx] -= blocks[:, 0, 0]
        M[idx, idx + n] -= blocks[:, 0, 1]
        M[idx + n, idx] -= blocks[:, 1, 0]
        M[idx + n, idx + n] -= blocks[:, 1, 1]
    try:
        return np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise NetworkNonConvergence(math.inf, 0) from None


def _fixed_point(Y, injection, v, tol, max_iter, blocks=None, Minv=None):
    """Iterate ``V <- V - M^-1 (Y V - I(V))`` to a fixed point of ``V = Y^-1 I(V)``.

    ``M`` is ``Y`` in real 2n form less the per-bus 2x2 injection Jacobians
    produced by ``blocks(V)``; it is rebuilt whenever a correction fails to
    shrink by 4x. With ``blocks=None`` this is the plain ``V = Y^-1 I(V)``
    iteration. A previously built ``Minv`` may be passed in for reuse.

    Returns ``(V, iterations, Minv)``.
    """
    n = v.shape[0]
    if Minv is None:
        Minv = _iteration_matrix(Y, None if blocks is None else blocks(v))

    def correction(v):
        r = Y @ v - injection(v)
        d = Minv @ np.concatenate((r.real, r.imag))
        return d[:n] + 1j * d[n:]

    dv = correction(v)
    prev = math.inf
    resid = math.inf
    for it in range(1, max_iter + 1):
        v = v - dv
        dv = correction(v)
        resid = float(np.max(np.abs(dv))) if n else 0.0
        if not math.isfinite(resid):
            break
        if resid <= tol:
            return v - dv, it, Minv
        if blocks is not None and resid > 0.25 * prev:
            Minv = _iteration_matrix(Y, blocks(v))
            dv = correction(v)
        prev = resid
    raise NetworkNonConvergence(resid, max_iter)


def _newton(Y, injection, v, tol, max_iter, blocks):
    """Plain Newton on ``Y V - I(V) = 0``, rebuilding the Jacobian every iteration.

    Used when the cheap iteration stalls near a voltage nose; undamped steps
    let it leave a vanished branch for the surviving solution.
    Returns ``(V, Minv)`` with the last iteration matrix.
    """
    n = v.shape[0]
    resid = math.inf
    for _ in range(max_iter):
        Minv = _iteration_matrix(Y, blocks(v))
        r = Y @ v - injection(v)
        d = Minv @ np.concatenate((r.real, r.imag))
        dv = d[:n] + 1j * d[n:]
        v = v - dv
        resid = float(np.max(np.abs(dv)))
        if not math.isfinite(resid):
            break
        if resid <= tol:
            return v, Minv
    raise NetworkNonConvergence(resid, max_iter)


def solve_network(Y, injection, v_guess, tol=1e-6, max_iter=20, blocks=None):
    """Fixed point of ``V = Y^-1 I(V)`` in max-norm; returns (V, iterations).

    ``blocks`` is an optional callable returning per-bus real 2x2 Jacobians
    of the injections; it speeds convergence without moving the fixed point.
    """
    Y = np.asarray(Y.toarray() if hasattr(Y, "toarray") else Y, dtype=complex)
    if not np.all(np.isfinite(Y)) or np.linalg.cond(Y) > 1e14:
        raise NetworkNonConvergence(math.inf, 0)
    v = np.asarray(v_guess, dtype=complex).copy()
    v, it, _ = _fixed_point(Y, injection, v, tol, max_iter, blocks)
    return v, it


# ---------------------------------------------------------------------------
# Engine


def _member_table(case, net):
    """Per interface: list of (end_idx, other_idx, y_self, y_other, sign) for live members."""
    idx = case.bus_index()
    branches = {br.id: br for br in case.branches}
    table = []
    for iface in case.interfaces:
        rows = []
        for m in iface.members:
            if not net.branch_status[m.branch_id]:
                continue
            br = branches[m.branch_id]
            yff, yft, ytf, ytt = branch_stamp(br)
            f, t = idx[br.from_bus], idx[br.to_bus]
            if m.metered_end == "from":
                rows.append((f, t, yff, yft, m.sign))
            else:
                rows.append((t, f, ytt, ytf, m.sign))
        table.append(rows)
    return table


def interface_flows(case, net, v):
    """Interface complex power (system pu) for voltage history ``v`` (n_t x n_bus)."""
    table = _member_table(case, net)
    out = np.zeros((v.shape[0], len(table)), dtype=complex)
    for k, rows in enumerate(table):
        for end, other, ys, yo, sign in rows:
            i = ys * v[:, end] + yo * v[:, other]
            out[:, k] += sign * v[:, end] * np.conj(i)
    return out


class _Engine:
    def __init__(self, case: SystemCase, init: DynamicState, config: SimulationConfig):
        self.case = case
        self.cfg = config
        self.base = case.system_mva_base
        self.f0 = case.nominal_frequency
        idx = case.bus_index()
        self.n = len(case.buses)
        flags = config.flags

        self.machines = [(m, idx[m.bus]) for m in case.machines if m.id in init.machines]
        self.ibrs = []
        for p in case.ibr_plants:
            if p.id in init.ibrs:
                dist = flags.distribution_pv or p.connection == "distribution"
                self.ibrs.append((p, idx[p.bus], dist))
        self.loads = [(ld, idx[ld.bus]) for ld in case.loads]

        self.ms = [init.machines[m.id] for m, _ in self.machines]
        self.ps = [init.ibrs[p.id] for p, _, _ in self.ibrs]
        self.ls = [init.loads[ld.id] for ld, _ in self.loads]
        self.m_alive = [True] * len(self.machines)
        self.p_alive = [True] * len(self.ibrs)
        self.y_norton = [
            m.mva_base / self.base / complex(0.0, 0.5 * (m.xd_p + m.xq_p)) for m, _ in self.machines
        ]
        self.net = NetworkState.initial(case)
        self.y_branch = None
        self._load_shunts = None
        self.Y = None
        self.Minv = None
        self._refactor_branches()

    # -- network -------------------------------------------------------------
    def _refactor_branches(self):
        self.y_branch = network_admittance(self.case, self.net)
        self._load_shunts = None  # force refactor

    def _refresh_Y(self):
        shunts = tuple(devices.load_shunt(st) for st in self.ls)
        if shunts == self._load_shunts and self.Y is not None:
            return
        self._load_shunts = shunts
        self.Minv = None
        Y = self.y_branch.copy()
        for (m, k), y, alive in zip(self.machines, self.y_norton, self.m_alive):
            if alive:
                Y[k, k] += y
        for (ld, k), y in zip(self.loads, shunts):
            Y[k, k] += y
        self.Y = Y

    def _blocks(self, v, h=1e-6):
        """Per-bus 2x2 real Jacobians of the injections (device currents are bus-local)."""
        i0 = self._injection(v)
        dr = (self._injection(v + h) - i0) / h
        di = (self._injection(v + 1j * h) - i0) / h
        B = np.empty((self.n, 2, 2))
        B[:, 0, 0] = dr.real
        B[:, 1, 0] = dr.imag
        B[:, 0, 1] = di.real
        B[:, 1, 1] = di.imag
        return B

    def _injection(self, v):
        inj = np.zeros(self.n, dtype=complex)
        base = self.base
        for (m, k), st, y, alive in zip(self.machines, self.ms, self.y_norton, self.m_alive):
            if alive:
                vk = complex(v[k])
                inj[k] += devices.machine_current(m, st, vk, base) + y * vk
        for (p, k, _), st, alive in zip(self.ibrs, self.ps, self.p_alive):
            if alive:
                inj[k] += devices.ibr_current(p, st, complex(v[k]), base)
        for (ld, k), st in zip(self.loads, self.ls):
            inj[k] -= devices.load_static_current(st, complex(v[k]))
        return inj

    def solve(self, v_guess):
        """Network voltages for the current device states.

        The cheap iteration reuses the last iteration matrix. If it stalls,
        full Newton gets a second chance from ``v_guess`` and then from the
        linear prediction; the latter catches the voltage jump that occurs
        when a depressed low-voltage solution stops existing.
        """
        self._refresh_Y()
        tol, max_iter = self.cfg.network_tol, self.cfg.network_max_iter
        try:
            v, _, self.Minv = _fixed_point(self.Y, self._injection, v_guess, tol, max_iter,
                                           self._blocks, self.Minv)
            return v
        except NetworkNonConvergence:
            pass
        budget = NEWTON_BUDGET * max_iter
        try:
            v, self.Minv = _newton(self.Y, self._injection, v_guess, tol, budget, self._blocks)
        except NetworkNonConvergence:
            v, self.Minv = _newton(self.Y, self._injection, self.predict(v_guess), tol, budget,
                                   self._blocks)
        return v

    def predict(self, v):
        """Linear estimate of the network voltages right after a switching event.

        Static nonlinear loads become their nominal admittance and converter
        currents keep their angle relative to ``v``. Starting the iteration
        here instead of at the pre-switching voltages keeps it on the
        high-voltage solution when a fault clears.
        """
        self._refresh_Y()
        Y = self.Y.copy()
        for (ld, k), st in zip(self.loads, self.ls):
            ref = st.ref
            Y[k, k] += (ref.s_i + ref.s_p).conjugate() / ref.v0**2
        inj = np.zeros(self.n, dtype=complex)
        for (m, k), st, y, alive in zip(self.machines, self.ms, self.y_norton, self.m_alive):
            if alive:
                vk = complex(v[k])
                inj[k] += devices.machine_current(m, st, vk, self.base) + y * vk
        for (p, k, _), st, alive in zip(self.ibrs, self.ps, self.p_alive):
            if alive:
                u = complex(v[k])
                u = u / abs(u) if abs(u) > devices.LOW_V else 1.0
                inj[k] += devices.ibr_current(p, st, u, self.base)
        try:
            return np.linalg.solve(Y, inj)
        except np.linalg.LinAlgError:
            return v

    # -- events ----------------------------------------------------------------
    def apply(self, event):
        before = self.net
        self.net = apply_event(self.net, event)
        if self.net is before:
            return
        if event.kind == "machine_trip":
            for j, (m, _) in enumerate(self.machines):
                if m.id == event.target:
                    self.m_alive[j] = False
            self._load_shunts = None
        elif event.kind == "ibr_trip":
            for j, (p, _, _) in enumerate(self.ibrs):
                if p.id == event.target:
                    self.p_alive[j] = False
        else:
            self._refactor_branches()

    # -- dynamics --------------------------------------------------------------
    def coi_speed(self):
        """Inertia-weighted mean speed deviation of the machines still online (pu)."""
        num = den = 0.0
        for (m, _), st, alive in zip(self.machines, self.ms, self.m_alive):
            if alive:
                w = m.H * m.mva_base
                num += w * st.omega
                den += w
        return num / den if den else 0.0

    def advance(self, v, freq, dt, v_mid):
        """Step every device from bus voltages ``v``; ``v_mid`` estimates them half a step on."""
        base, f0, flags = self.base, self.f0, self.cfg.flags
        w_ref = self.coi_speed()
        for j, ((m, k), st) in enumerate(zip(self.machines, self.ms)):
            if self.m_alive[j]:
                self.ms[j], _ = devices.machine_step(m, st, complex(v[k]), dt, base, f0, w_ref,
                                                     complex(v_mid[k]))
        for j, ((p, k, dist), st) in enumerate(zip(self.ibrs, self.ps)):
            if self.p_alive[j]:
                step = devices.dist_pv_step if dist else devices.ibr_step
                self.ps[j], _ = step(p, st, complex(v[k]), float(freq[k]), dt, flags, base,
                                     complex(v_mid[k]))
        for j, ((ld, k), st) in enumerate(zip(self.loads, self.ls)):
            self.ls[j], _, _ = devices.composite_load_step(ld, st, complex(v[k]), dt, flags)


_LOAD_MODE = {"run": 0.0, "stalled": 1.0, "tripped_fraction": 2.0}


def run_simulation(case: SystemCase, init: DynamicState, contingency: Contingency | None,
                   config: SimulationConfig = SimulationConfig()):
    """Simulate ``contingency`` from the equilibrium ``init`` out to ``config.t_stop``.

    Divergence (network non-convergence or a device guard) ends the run
    early with ``status == "diverged"``; recorded series stop at that time.
    """
    cfg = config
    dt = cfg.dt
    n_steps = cfg.n_steps
    eng = _Engine(case, init, cfg)

    events = list(contingency.events) if contingency is not None else []
    # an event fires at the first grid point at or after its time
    fire_at = [max(1, math.ceil(ev.t / dt - 1e-9)) for ev in events]

    nt = n_steps + 1
    n = eng.n
    V = np.zeros((nt, n), dtype=complex)
    F = np.zeros((nt, n))
    coi = np.zeros(nt)
    dev_names = []
    for m, _ in eng.machines:
        dev_names += [f"dev.{m.id}.delta", f"dev.{m.id}.omega"]
    for p, _, _ in eng.ibrs:
        dev_names += [f"dev.{p.id}.ip_out", f"dev.{p.id}.mc_active", f"dev.{p.id}.online_fraction"]
    for ld, _ in eng.loads:
        if ld.motor_fraction > 0:
            dev_names += [f"dev.{ld.id}.mode", f"dev.{ld.id}.tripped_share"]
    D = np.zeros((nt, len(dev_names)))

    def record(k):
        j = 0
        for i, st in enumerate(eng.ms):
            D[k, j] = st.delta
            D[k, j + 1] = st.omega
            j += 2
        for st in eng.ps:
            D[k, j] = st.ip_out
            D[k, j + 1] = float(st.mc_active)
            D[k, j + 2] = st.online_fraction
            j += 3
        for (ld, _), st in zip(eng.loads, eng.ls):
            if ld.motor_fraction > 0:
                D[k, j] = _LOAD_MODE[st.mode]
                D[k, j + 1] = st.tripped_share
                j += 2
        coi[k] = f0 * (1.0 + eng.coi_speed())

    f0 = eng.f0
    v = init.v.astype(complex).copy()
    status, t_div, dev_div, message = "completed", None, None, ""
    topo_marks = [(0, eng.net)]
    try:
        v = eng.solve(v)
    except NetworkNonConvergence as exc:
        return _diverged_at_start(case, cfg, str(exc))
    V[0] = v
    F[0] = f0
    record(0)
    ang_prev = np.angle(v)
    fdev = np.zeros(n)
    alpha = dt / cfg.freq_filter_T
    two_pi_dt = 2.0 * math.pi * dt
    freq = F[0].copy()
    last = 0
    ev_ptr = 0
    v_prev = v  # reset after switching so extrapolation never spans a jump
    for k in range(n_steps):
        t_next = (k + 1) * dt
        try:
            eng.advance(v, freq, dt, 1.5 * v - 0.5 * v_prev)
            v_prev = v
            fired = False
            while ev_ptr < len(events) and fire_at[ev_ptr] <= k + 1:
                eng.apply(events[ev_ptr])
                ev_ptr += 1
                fired = True
            if fired:
                topo_marks.append((k + 1, eng.net))
                try:
                    v = eng.solve(eng.predict(v))
                except NetworkNonConvergence:
                    v = eng.solve(v)
                v_prev = v
            else:
                v = eng.solve(v)
        except DeviceDivergence as exc:
            status, t_div, dev_div, message = "diverged", t_next, exc.device, str(exc)
            break
        except NetworkNonConvergence as exc:
            status, t_div, dev_div, message = "diverged", t_next, "network", str(exc)
            break
        ang = np.angle(v)
        dang = (ang - ang_prev + math.pi) % (2.0 * math.pi) - math.pi
        ang_prev = ang
        fdev += alpha * (dang / two_pi_dt - fdev)
        freq = f0 + fdev
        V[k + 1] = v
        F[k + 1] = freq
        record(k + 1)
        last = k + 1

    nt_used = last + 1
    V, F, D, coi = V[:nt_used], F[:nt_used], D[:nt_used], coi[:nt_used]
    S = np.zeros((nt_used, len(case.interfaces)), dtype=complex)
    marks = topo_marks + [(nt_used, None)]
    for (k0, net), (k1, _) in zip(marks[:-1], marks[1:]):
        if k1 > k0:
            S[k0:k1] = interface_flows(case, net, V[k0:k1])
    S *= case.system_mva_base
    return SimulationResult(
        time=np.arange(nt_used) * dt,
        bus_ids=[b.id for b in case.buses],
        v=V,
        freq=F,
        coi_freq=coi,
        iface_ids=[i.id for i in case.interfaces],
        iface_mw=S.real,
        iface_mva=np.abs(S),
        device={name: D[:, j] for j, name in enumerate(dev_names)},
        status=status,
        diverged_at=t_div,
        diverged_device=dev_div,
        message=message,
        record=tuple(cfg.record),
    )


def _diverged_at_start(case, cfg, message):
    n = len(case.buses)
    return SimulationResult(
        time=np.zeros(0), bus_ids=[b.id for b in case.buses], v=np.zeros((0, n), dtype=complex),
        freq=np.zeros((0, n)), coi_freq=np.zeros(0), iface_ids=[i.id for i in case.interfaces],
        iface_mw=np.zeros((0, len(case.interfaces))), iface_mva=np.zeros((0, len(case.interfaces))),
        device={}, status="diverged", diverged_at=0.0, diverged_device="network", message=message,
    )
