"""Dynamic device models.

Each device is a pure ``(state, terminal voltage) -> (new state, injection)``
step function. Voltages and injected currents are complex per-unit on the
system base; internal machine and converter quantities stay on the device's
own MVA base.

Synchronous machine: two-axis model with a first-order droop governor and a
first-order exciter. Inverter plants: current source with low-voltage power
logic (LVPL); the zero-current region of the LVPL is momentary cessation.
Distribution PV adds partial voltage/frequency tripping. Composite load:
ZIP static part plus a constant-admittance motor that can stall.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .case import CompositeLoad, IbrPlant, SyncMachine

OMEGA_GUARD = 0.2
LOW_V = 0.05  # current-source injections fade linearly to zero below this |v|
ZEROX_DISABLED = 0.05  # cessation threshold used when the sensitivity is off
CONST_P_VMIN = 0.7  # constant-power load starts blending into constant impedance below this |v|
CONST_P_VZ = 0.5  # ... and is pure constant impedance below this one
_EPS_T = 1e-9


class DeviceDivergence(RuntimeError):
    def __init__(self, device, reason, t=None):
        self.device = device
        self.reason = reason
        self.t = t
        where = f" at t={t:.4f} s" if t is not None else ""
        super().__init__(f"{device}: {reason}{where}")


@dataclass(frozen=True)
class SensitivityFlags:
    momentary_cessation: bool = False
    distribution_pv: bool = False
    motor_stall: bool = False

    @property
    def label(self):
        on = [n for n in ("momentary_cessation", "distribution_pv", "motor_stall") if getattr(self, n)]
        return "+".join(on) if on else "none"

    def as_dict(self):
        return {
            "momentary_cessation": self.momentary_cessation,
            "distribution_pv": self.distribution_pv,
            "motor_stall": self.motor_stall,
        }


# ---------------------------------------------------------------------------
# Synchronous machine


@dataclass(frozen=True, slots=True)
class MachineState:
    delta: float
    omega: float
    Eq_p: float
    Ed_p: float
    Efd: float
    Pm: float
    Pref: float
    Vref: float


def machine_dq(m: SyncMachine, st: MachineState, v: complex):
    """Stator algebraics: returns (id, iq, vd, vq) on the machine base."""
    s, c = math.sin(st.delta), math.cos(st.delta)
    # network -> dq frame is a rotation by -(delta - pi/2)
    vd = v.real * s - v.imag * c
    vq = v.real * c + v.imag * s
    i_d = (st.Eq_p - vq) / m.xd_p
    i_q = (vd - st.Ed_p) / m.xq_p
    return i_d, i_q, vd, vq


def machine_current(m: SyncMachine, st: MachineState, v: complex, system_mva=100.0):
    """Current injected into the network, system base."""
    i_d, i_q, _, _ = machine_dq(m, st, v)
    s, c = math.sin(st.delta), math.cos(st.delta)
    k = m.mva_base / system_mva
    return complex(i_d * s + i_q * c, i_q * s - i_d * c) * k


def machine_electrical_power(m, st, v):
    i_d, i_q, vd, vq = machine_dq(m, st, v)
    return vd * i_d + vq * i_q


def machine_derivatives(m: SyncMachine, st: MachineState, v: complex, omega_s, omega_ref=0.0):
    """State derivatives; damping acts on the speed relative to ``omega_ref``."""
    _, _, vd, vq = machine_dq(m, st, v)
    return _derivatives_dq(m, st, vd, vq, abs(v), omega_s, omega_ref)


def _derivatives_dq(m, st, vd, vq, vmag, omega_s, omega_ref=0.0, at_limits=True):
    # at_limits=False leaves the limiters to the state clamp in _machine_advance; a
    # derivative zeroed at a clamped midpoint would otherwise stall the whole step
    i_d = (st.Eq_p - vq) / m.xd_p
    i_q = (vd - st.Ed_p) / m.xq_p
    pe = vd * i_d + vq * i_q
    d_delta = omega_s * st.omega
    d_omega = (st.Pm - pe - m.D * (st.omega - omega_ref)) / (2.0 * m.H)
    d_eq = (-st.Eq_p - (m.xd - m.xd_p) * i_d + st.Efd) / m.Td0_p
    d_ed = (-st.Ed_p + (m.xq - m.xq_p) * i_q) / m.Tq0_p

    gov = m.governor
    d_pm = (st.Pref - st.omega / gov.R - st.Pm) / gov.Tg
    if at_limits and ((st.Pm >= gov.p_max and d_pm > 0) or (st.Pm <= 0.0 and d_pm < 0)):
        d_pm = 0.0
    exc = m.exciter
    d_efd = (exc.Ka * (st.Vref - vmag) - st.Efd) / exc.Ta
    if at_limits and ((st.Efd >= exc.Efd_max and d_efd > 0) or (st.Efd <= exc.Efd_min and d_efd < 0)):
        d_efd = 0.0
    return d_delta, d_omega, d_eq, d_ed, d_efd, d_pm


def _machine_advance(m, st, d, h):
    gov, exc = m.governor, m.exciter
    return MachineState(
        st.delta + h * d[0],
        st.omega + h * d[1],
        st.Eq_p + h * d[2],
        st.Ed_p + h * d[3],
        min(max(st.Efd + h * d[4], exc.Efd_min), exc.Efd_max),
        min(max(st.Pm + h * d[5], 0.0), gov.p_max),
        st.Pref,
        st.Vref,
    )


def machine_step(m: SyncMachine, st: MachineState, v_term: complex, dt, system_mva=100.0,
                 f_nominal=60.0, omega_ref=0.0, v_mid=None):
    """One midpoint (RK2) step from terminal voltage ``v_term``.

    ``v_mid`` is the terminal voltage expected half a step ahead. When it is
    omitted the dq components of ``v_term`` are held over the step instead:
    a phasor held in the synchronous frame would slip against the rotor by
    ``omega_s * omega * dt / 2`` at the midpoint and bias the electrical
    power of a machine running steadily off nominal speed.

    ``omega_ref`` is the speed the damping torque is measured against (the
    system centre-of-inertia speed in a multi-machine run), held over the step.

    Returns the new state and the injection it produces at ``v_term``.
    """
    omega_s = 2.0 * math.pi * f_nominal
    _, _, vd, vq = machine_dq(m, st, v_term)
    vmag = abs(v_term)
    k1 = _derivatives_dq(m, st, vd, vq, vmag, omega_s, omega_ref, False)
    mid = _machine_advance(m, st, k1, 0.5 * dt)
    if v_mid is not None:
        _, _, vd, vq = machine_dq(m, mid, v_mid)
        vmag = abs(v_mid)
    k2 = _derivatives_dq(m, mid, vd, vq, vmag, omega_s, omega_ref, False)
    new = _machine_advance(m, st, k2, dt)
    if not abs(new.omega) < OMEGA_GUARD:
        raise DeviceDivergence(m.id, f"speed deviation {new.omega:.3g} pu exceeds guard")
    return new, machine_current(m, new, v_term, system_mva)


def init_machine(m: SyncMachine, v: complex, s_gen: complex, system_mva=100.0):
    """Equilibrium state for a machine delivering ``s_gen`` (system pu) at ``v``."""
    k = m.mva_base / system_mva
    s = s_gen / k
    if abs(v) == 0:
        raise ValueError(f"{m.id}: zero terminal voltage")
    i = (s / v).conjugate()
    e_q = v + 1j * m.xq * i
    delta = math.atan2(e_q.imag, e_q.real)
    rot = complex(math.sin(delta), math.cos(delta))
    vdq = v * rot
    idq = i * rot
    vd, vq = vdq.real, vdq.imag
    i_d, i_q = idq.real, idq.imag
    ed_p = (m.xq - m.xq_p) * i_q
    eq_p = vq + m.xd_p * i_d
    efd = eq_p + (m.xd - m.xd_p) * i_d
    pm = vd * i_d + vq * i_q
    exc = m.exciter
    if not exc.Efd_min <= efd <= exc.Efd_max:
        raise ValueError(f"{m.id}: required Efd {efd:.3f} outside [{exc.Efd_min}, {exc.Efd_max}]")
    if not 0.0 <= pm <= m.governor.p_max + 1e-12:
        raise ValueError(f"{m.id}: required Pm {pm:.3f} outside [0, {m.governor.p_max}]")
    vref = abs(v) + efd / exc.Ka
    return MachineState(delta, 0.0, eq_p, ed_p, efd, pm, pm, vref)


# ---------------------------------------------------------------------------
# Inverter-based plants


@dataclass(frozen=True, slots=True)
class IbrState:
    ip_cmd: float
    iq_cmd: float
    ip_out: float
    iq_out: float
    mc_active: bool = False
    online_fraction: float = 1.0
    tripped_fraction_permanent: float = 0.0
    reconnect_pending: float = 0.0


def effective_zerox(plant: IbrPlant, flags: SensitivityFlags):
    return plant.converter.zerox if flags.momentary_cessation else ZEROX_DISABLED


def lvpl_cap(v_mag, zerox, brkpt, gain):
    """Active-current limit of the low-voltage power logic."""
    if v_mag >= brkpt:
        return math.inf
    if v_mag <= zerox:
        return 0.0
    return gain * (v_mag - zerox)


def ibr_current(plant: IbrPlant, st: IbrState, v: complex, system_mva=100.0):
    k = plant.mva_base / system_mva * st.online_fraction
    if k == 0.0:
        return 0j
    vm = abs(v)
    i_loc = complex(st.ip_out, -st.iq_out)
    if vm < LOW_V:
        return i_loc * v / LOW_V * k
    return i_loc * v / vm * k


def current_commands(plant: IbrPlant, v_mag):
    """Active and reactive current orders holding the dispatched P and Q, within ``i_max``."""
    conv = plant.converter
    vc = max(v_mag, LOW_V)
    ip = min(plant.p_out / plant.mva_base / vc, conv.i_max)
    iq = min(max(plant.q_out / plant.mva_base / vc, -conv.i_max), conv.i_max)
    return ip, iq


def _converter_advance(plant, st, vm, zerox, dt, vm_mid):
    """Midpoint step of the filtered current outputs toward the capped orders."""
    conv = plant.converter

    def targets(v):
        ip_cmd, iq_cmd = current_commands(plant, v)
        return min(ip_cmd, lvpl_cap(v, zerox, conv.lvpl_brkpt, conv.lvpl_gain)), iq_cmd

    def dip(ip, target):
        return min((target - ip) / conv.Tfilter, conv.rrpwr)

    p1, q1 = targets(vm)
    p2, q2 = targets(vm_mid) if vm_mid != vm else (p1, q1)
    ip = st.ip_out + dt * dip(st.ip_out + 0.5 * dt * dip(st.ip_out, p1), p2)
    # first-order lag toward the midpoint order, exact update
    a = math.exp(-dt / conv.Tfilter)
    iq = q2 + (st.iq_out - q2) * a
    return max(ip, 0.0), iq


def ibr_step(plant: IbrPlant, st: IbrState, v_term: complex, freq_bus, dt, flags: SensitivityFlags,
             system_mva=100.0, v_mid=None):
    """Advance a transmission-connected converter by ``dt`` from ``v_term``.

    Current orders are re-derived from the dispatch at the present voltage
    (and at ``v_mid``, the voltage expected half a step ahead, for the
    midpoint stage). ``mc_active`` reflects only the current voltage, so
    cessation re-enters every time the voltage drops below the threshold.
    """
    vm = abs(v_term)
    ip_cmd, iq_cmd = current_commands(plant, vm)
    zerox = effective_zerox(plant, flags)
    vm_mid = vm if v_mid is None else abs(v_mid)
    ip, iq = _converter_advance(plant, st, vm, zerox, dt, vm_mid)
    if not (math.isfinite(ip) and math.isfinite(iq)):
        raise DeviceDivergence(plant.id, "non-finite converter current")
    new = IbrState(ip_cmd, iq_cmd, ip, iq, vm <= zerox, st.online_fraction,
                   st.tripped_fraction_permanent, st.reconnect_pending)
    return new, ibr_current(plant, new, v_term, system_mva)


def trip_target(plant: IbrPlant, v_mag):
    d = plant.dist_trip
    if v_mag >= d.v_trip_start:
        return 1.0
    if v_mag <= d.v_trip_full:
        return 0.0
    return (v_mag - d.v_trip_full) / (d.v_trip_start - d.v_trip_full)


def dist_pv_step(plant: IbrPlant, st: IbrState, v_term: complex, freq_bus, dt, flags=SensitivityFlags(),
                 system_mva=100.0, v_mid=None):
    """Distribution-connected PV: the converter core plus partial tripping.

    Any share shed on low voltage splits into a reconnectable part
    (``recoverable_fraction``) that ramps back at ``rrpwr`` once the voltage
    allows, and a permanent part. Underfrequency trips the whole plant.
    """
    core, _ = ibr_step(plant, st, v_term, freq_bus, dt, flags, system_mva, v_mid)
    d = plant.dist_trip
    online = st.online_fraction
    perm = st.tripped_fraction_permanent
    pending = st.reconnect_pending
    if freq_bus < d.f_trip:
        online, perm, pending = 0.0, 1.0, 0.0
    else:
        target = trip_target(plant, abs(v_term))
        if target < online:
            shed = online - target
            online = target
            perm += shed * (1.0 - d.recoverable_fraction)
            pending += shed * d.recoverable_fraction
        elif pending > 0.0 and target > online:
            ramp = min(plant.converter.rrpwr * dt, pending, target - online)
            online += ramp
            pending -= ramp
    new = IbrState(core.ip_cmd, core.iq_cmd, core.ip_out, core.iq_out, core.mc_active,
                   online, min(perm, 1.0), pending)
    return new, ibr_current(plant, new, v_term, system_mva)


def init_ibr(plant: IbrPlant, v: complex):
    vm = abs(v)
    ip = plant.p_out / plant.mva_base / vm
    iq = plant.q_out / plant.mva_base / vm
    conv = plant.converter
    if max(ip, abs(iq)) > conv.i_max:
        raise ValueError(f"{plant.id}: dispatch needs more than i_max={conv.i_max} at |v|={vm:.3f}")
    cap = lvpl_cap(vm, conv.zerox, conv.lvpl_brkpt, conv.lvpl_gain)
    if ip > cap:
        raise ValueError(f"{plant.id}: dispatch needs ip={ip:.3f} above LVPL cap {cap:.3f} at |v|={vm:.3f}")
    return IbrState(ip, iq, ip, iq, False)


# ---------------------------------------------------------------------------
# Composite load


@dataclass(frozen=True, slots=True)
class LoadRef:
    """Quantities fixed at initialization (system pu)."""

    v0: float
    y_z: complex  # constant-impedance static part
    s_i: complex  # constant-current static part, power at v0
    s_p: complex  # constant-power static part
    y_run: complex  # running motor admittance
    y_stall: complex  # stalled motor admittance


@dataclass(frozen=True, slots=True)
class MotorState:
    mode: str  # run | stalled | tripped_fraction
    undervoltage_timer: float
    stall_elapsed: float
    tripped_share: float
    ref: LoadRef


def init_load(load: CompositeLoad, v: complex, system_mva=100.0):
    vm = abs(v)
    s = complex(load.p, load.q) / system_mva
    static = s * (1.0 - load.motor_fraction)
    zp, zq = load.zip_p, load.zip_q
    s_z = complex(static.real * zp.z, static.imag * zq.z)
    s_i = complex(static.real * zp.i, static.imag * zq.i)
    s_p = complex(static.real * zp.p, static.imag * zq.p)
    s_m = s * load.motor_fraction
    motor_base = abs(s_m)
    mot = load.motor
    y_stall = motor_base / complex(mot.r_stall, mot.x_stall) if motor_base > 0 else 0j
    ref = LoadRef(vm, s_z.conjugate() / vm**2, s_i, s_p, s_m.conjugate() / vm**2, y_stall)
    return MotorState("run", 0.0, 0.0, 0.0, ref)


def load_static_current(st: MotorState, v: complex):
    """Current drawn by the constant-current and constant-power parts."""
    ref = st.ref
    vm = abs(v)
    i = 0j
    if ref.s_i:
        scale = v / LOW_V if vm < LOW_V else v / vm
        i += ref.s_i.conjugate() / ref.v0 * scale
    if ref.s_p:
        if vm >= CONST_P_VMIN:
            i += ref.s_p.conjugate() / v.conjugate()
        else:
            i += ref.s_p.conjugate() * const_p_scale(vm) / CONST_P_VMIN**2 * v
    return i


def const_p_scale(vm):
    """Fraction of nominal constant-power demand kept at ``vm``, relative to v**2/CONST_P_VMIN**2.

    The blend is C1 so the network iteration does not cycle across the corner.
    """
    if vm >= CONST_P_VMIN:
        return CONST_P_VMIN**2 / (vm * vm)
    if vm <= CONST_P_VZ:
        return 1.0
    x = (vm - CONST_P_VZ) / (CONST_P_VMIN - CONST_P_VZ)
    s = x * x * (3.0 - 2.0 * x)
    return (1.0 - s) + s * CONST_P_VMIN**2 / (vm * vm)


def motor_admittance(st: MotorState):
    if st.mode == "run":
        return st.ref.y_run
    return st.ref.y_stall * (1.0 - st.tripped_share)


def load_shunt(st: MotorState):
    return st.ref.y_z + motor_admittance(st)


def load_power(st: MotorState, v: complex):
    """Total complex power consumed at ``v`` (system pu)."""
    i = load_static_current(st, v) + load_shunt(st) * v
    return v * i.conjugate()


def composite_load_step(load: CompositeLoad, st: MotorState, v_term: complex, dt, flags: SensitivityFlags):
    """Advance stall detection and thermal tripping.

    Returns ``(state, i_inj, y_shunt)`` where ``i_inj`` is the current
    injected by the static non-impedance parts and ``y_shunt`` the
    admittance the network should carry for the impedance parts.
    """
    mode, timer, elapsed, share = st.mode, st.undervoltage_timer, st.stall_elapsed, st.tripped_share
    active = load.stall_enabled and flags.motor_stall and load.motor_fraction > 0
    mot = load.motor
    if active:
        if mode == "run":
            if abs(v_term) < mot.Vstall:
                timer += dt
                if timer >= mot.Tstall - _EPS_T:
                    mode = "stalled"
                    elapsed = 0.0
            else:
                timer = 0.0
        else:
            elapsed += dt
            if elapsed >= mot.thermal_trip_time - _EPS_T:
                frac = (elapsed - mot.thermal_trip_time) / mot.thermal_trip_time
                share = mot.thermal_trip_fraction * min(max(frac, 0.0), 1.0)
                if share > 0.0:
                    mode = "tripped_fraction"
    new = MotorState(mode, timer, elapsed, share, st.ref)
    return new, -load_static_current(new, v_term), load_shunt(new)
