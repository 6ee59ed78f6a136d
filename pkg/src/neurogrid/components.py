"""Analytical dynamic components: two-axis generator, exciter, converter device.

Each component type is stored as a vectorized group (one row per unit) so a
simulation step touches every unit of a type with a handful of array ops.
Complex quantities are in the network frame; the generator dq frame is
rotated by ``delta - pi/2`` so the q axis sits on ``delta``.

The implicit trapezoidal step of a group is solved by fixed-point sweeps in
which every state's own linear decay term is taken implicitly (closed form)
and the remaining couplings use the latest iterate, in an order that follows
the signal flow (exciter: Vm, Va, Efd, Vf; generator: E'q, E'd, omega, delta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid.cases import Case, DeviceData, ExciterData, GeneratorData

HALF_PI = 0.5 * math.pi


class ComponentError(ValueError):
    pass


# --- generator ------------------------------------------------------------------


def _rot(delta):
    return np.exp(1j * (delta - HALF_PI))


def generator_dq(delta, v):
    """Terminal voltage in the machine frame: (v_d, v_q)."""
    vdq = np.asarray(v) * np.conj(_rot(delta))
    return vdq.real, vdq.imag


def generator_current_dq(delta, eq, ed, v, xd_p, xq_p):
    vd, vq = generator_dq(delta, v)
    return (eq - vq) / xd_p, (vd - ed) / xq_p


def generator_current(delta, eq, ed, v, xd_p, xq_p):
    """Stator current injected into the network (armature resistance neglected)."""
    i_d, i_q = generator_current_dq(delta, eq, ed, v, xd_p, xq_p)
    return (i_d + 1j * i_q) * _rot(delta)


def generator_derivatives(gen: GeneratorData, state, v, pm, efd, ws: float, omega_ref: float = 0.0):
    """d/dt of (delta, omega, E'q, E'd) for one machine.

    ``omega_ref`` is the speed of the reference frame; the simulator passes
    the centre-of-inertia speed so angles stay put under common-mode drift.
    """
    if not gen.H > 0:
        raise ComponentError(f"generator {gen.bus}: inertia must be positive")
    delta, omega, eq, ed = state
    i_d, i_q = generator_current_dq(delta, eq, ed, v, gen.xd_p, gen.xq_p)
    vd, vq = generator_dq(delta, v)
    pe = vd * i_d + vq * i_q
    return np.array([
        ws * (omega - omega_ref),
        (pm - pe - gen.D * omega) / (2.0 * gen.H),
        (efd - eq - (gen.xd - gen.xd_p) * i_d) / gen.Td0_p,
        (-ed + (gen.xq - gen.xq_p) * i_q) / gen.Tq0_p,
    ])


def generator_init(gen: GeneratorData, v0: complex, i0: complex):
    """Equilibrium states, mechanical power and field voltage from the terminal phasors."""
    e_q_axis = v0 + 1j * gen.xq * i0
    delta = float(np.angle(e_q_axis))
    idq = i0 * np.conj(_rot(delta))
    vdq = v0 * np.conj(_rot(delta))
    i_d, i_q = idq.real, idq.imag
    vd, vq = vdq.real, vdq.imag
    ed = vd - gen.xq_p * i_q
    eq = vq + gen.xd_p * i_d
    efd = eq + (gen.xd - gen.xd_p) * i_d
    pm = vd * i_d + vq * i_q
    return np.array([delta, 0.0, eq, ed]), pm, efd


class GeneratorGroup:
    names = ("delta", "omega", "eq", "ed")

    def __init__(self, gens: list[GeneratorData], frequency_hz: float):
        self.buses = [g.bus for g in gens]
        self.n = len(gens)
        self.ws = 2.0 * math.pi * frequency_hz
        col = lambda k: np.array([getattr(g, k) for g in gens], dtype=float)
        self.H, self.D = col("H"), col("D")
        if np.any(self.H <= 0):
            raise ComponentError("generator inertia must be positive")
        self.xd, self.xq, self.xdp, self.xqp = col("xd"), col("xq"), col("xd_p"), col("xq_p")
        self.Td0, self.Tq0 = col("Td0_p"), col("Tq0_p")
        # Norton admittance from the mean of the two transient susceptances; the
        # saliency remainder (a term in conj(v)) is left to the network iteration
        self.y_norton = -0.5j * (1.0 / self.xdp + 1.0 / self.xqp)
        self.online = np.ones(self.n, dtype=bool)
        self.pm = np.zeros(self.n)

    def current(self, y, v):
        i = generator_current(y[:, 0], y[:, 2], y[:, 3], v, self.xdp, self.xqp)
        return np.where(self.online, i, 0j)

    def electrical_power(self, y, v):
        return np.real(v * np.conj(self.current(y, v)))

    def omega_coi(self, omega):
        w = self.H * self.online
        total = w.sum()
        return float(np.dot(w, omega) / total) if total > 0 else 0.0

    def derivatives(self, y, v, efd):
        delta, omega, eq, ed = y.T
        vd, vq = generator_dq(delta, v)
        i_d = (eq - vq) / self.xdp
        i_q = (vd - ed) / self.xqp
        pe = vd * i_d + vq * i_q
        f = np.column_stack([
            self.ws * (omega - self.omega_coi(omega)),
            (self.pm - pe - self.D * omega) / (2.0 * self.H),
            (efd - eq - (self.xd - self.xdp) * i_d) / self.Td0,
            (-ed + (self.xq - self.xqp) * i_q) / self.Tq0,
        ])
        f[~self.online] = 0.0
        return f

    def _coefficients(self, h):
        if getattr(self, "_coef_h", None) != h:
            hh = 0.5 * h
            self._coef_h = h
            self._coef = (
                hh,
                (self.xd - self.xdp) / self.xdp,
                1.0 / (1.0 + hh * self.xd / (self.xdp * self.Td0)),
                (self.xq - self.xqp) / (self.xqp * self.Tq0),
                1.0 / (1.0 + hh * self.xq / (self.xqp * self.Tq0)),
                1.0 / (1.0 + hh * self.D / (2.0 * self.H)),
                self.H / self.H.sum(),
            )
        return self._coef

    def trap_sweep(self, y0, f0, y, v, efd, h):
        """One fixed-point sweep of the trapezoidal equations at terminal voltage ``v``."""
        hh, kd, dq, kq, dd, dw, _ = self._coefficients(h)
        vdq = v * np.exp(-1j * (y[:, 0] - HALF_PI))
        vd, vq = vdq.real, vdq.imag
        # each state's own decay is implicit, e.g. E'q: (efd + kd vq - xd/xd' E'q) / Td0'
        eq = (y0[:, 2] + hh * (f0[:, 2] + (efd + kd * vq) / self.Td0)) * dq
        ed = (y0[:, 3] + hh * (f0[:, 3] + kq * vd)) * dd
        pe = vd * (eq - vq) / self.xdp + vq * (vd - ed) / self.xqp
        omega = (y0[:, 1] + hh * (f0[:, 1] + (self.pm - pe) / (2.0 * self.H))) * dw
        delta = y0[:, 0] + hh * (f0[:, 0] + self.ws * (omega - self.omega_coi(omega)))
        out = np.empty((self.n, 4))
        out[:, 0] = delta
        out[:, 1] = omega
        out[:, 2] = eq
        out[:, 3] = ed
        if not self.online.all():
            out[~self.online] = y0[~self.online]
        return out


# --- exciter --------------------------------------------------------------------


@dataclass
class ExciterRefs:
    vref: float
    efd_ref: float
    state: np.ndarray  # (vm, va, efd, vf)


def _clamped_efd_rate(efd, rate, lo, hi):
    rate = np.where((efd >= hi) & (rate > 0), 0.0, rate)
    return np.where((efd <= lo) & (rate < 0), 0.0, rate)


def exciter_derivatives(exc: ExciterData, state, V, Vs, vref, efd_ref):
    """d/dt of (Vm, Va, Efd, Vf); Efd's rate is zeroed when it pushes past a limit."""
    if vref is None or efd_ref is None:
        raise ComponentError("exciter references are not initialized")
    vm, va, efd, vf = state
    dvm = (exc.km * V - vm) / exc.tm
    e = vref - vm + Vs - vf
    dva = (exc.ka * e - va) / exc.ta
    defd = float(_clamped_efd_rate(efd, (va + efd_ref - exc.ke * efd) / exc.te, exc.efd_min, exc.efd_max))
    dvf = (exc.kf * defd - vf) / exc.tf
    return np.array([dvm, dva, defd, dvf])


def exciter_init(exc: ExciterData, V0: float, Efd0: float, Vs0: float = 0.0) -> ExciterRefs:
    """References that hold (V0, Efd0) in equilibrium with Va = Vf = 0."""
    if not exc.efd_min <= Efd0 <= exc.efd_max:
        raise ComponentError(
            f"exciter on generator {exc.gen_bus}: Efd0 = {Efd0:.4f} outside [{exc.efd_min}, {exc.efd_max}]"
        )
    vm = exc.km * V0
    return ExciterRefs(vref=vm - Vs0, efd_ref=exc.ke * Efd0, state=np.array([vm, 0.0, Efd0, 0.0]))


class ExciterGroup:
    names = ("vm", "va", "efd", "vf")

    def __init__(self, excs: list[ExciterData]):
        self.gen_buses = [e.gen_bus for e in excs]
        self.n = len(excs)
        col = lambda k: np.array([getattr(e, k) for e in excs], dtype=float)
        for k in ("km", "tm", "ka", "ta", "ke", "te", "kf", "tf", "efd_min", "efd_max"):
            setattr(self, k, col(k))
        if np.any(np.concatenate([self.tm, self.ta, self.te, self.tf]) <= 0):
            raise ComponentError("exciter time constants must be positive")
        self.vref = np.zeros(self.n)
        self.efd_ref = np.zeros(self.n)

    def derivatives(self, y, V, Vs):
        vm, va, efd, vf = y.T
        dvm = (self.km * V - vm) / self.tm
        dva = (self.ka * (self.vref - vm + Vs - vf) - va) / self.ta
        defd = _clamped_efd_rate(efd, (va + self.efd_ref - self.ke * efd) / self.te, self.efd_min, self.efd_max)
        dvf = (self.kf * defd - vf) / self.tf
        return np.column_stack([dvm, dva, defd, dvf])

    def trap_sweep(self, y0, f0, y, V, Vs, h):
        """Trapezoidal step solved exactly: the loop is linear except for the Efd clamp.

        With Efd free, Va, Efd and the rate feeding Vf are affine in Vf, so Vf follows
        from one scalar equation. When the free solution crosses a limit, Efd is held
        there with a zero rate and Vf only decays.
        """
        hh = 0.5 * h
        vm = (y0[:, 0] + hh * (f0[:, 0] + self.km * V / self.tm)) / (1.0 + hh / self.tm)
        # va = alpha - beta vf
        da = 1.0 + hh / self.ta
        alpha = (y0[:, 1] + hh * (f0[:, 1] + self.ka * (self.vref - vm + Vs) / self.ta)) / da
        beta = hh * self.ka / self.ta / da
        # efd = g0 + g1 va ; rate = (va + efd_ref - ke efd) / te
        de = 1.0 + hh * self.ke / self.te
        g0 = (y0[:, 2] + hh * (f0[:, 2] + self.efd_ref / self.te)) / de
        g1 = hh / self.te / de
        r1 = (1.0 - self.ke * g1) / self.te
        r0 = (self.efd_ref - self.ke * g0) / self.te
        # vf = phi + psi rate
        df = 1.0 + hh / self.tf
        phi = (y0[:, 3] + hh * f0[:, 3]) / df
        psi = hh * self.kf / self.tf / df
        vf = (phi + psi * (r1 * alpha + r0)) / (1.0 + psi * r1 * beta)
        va = alpha - beta * vf
        efd = g0 + g1 * va
        out = np.empty((self.n, 4))
        out[:, 0] = vm
        out[:, 1] = va
        out[:, 2] = efd
        out[:, 3] = vf
        hit = (efd > self.efd_max) | (efd < self.efd_min)
        if hit.any():
            lim = np.where(efd > self.efd_max, self.efd_max, self.efd_min)
            out[hit, 3] = phi[hit]
            out[hit, 1] = alpha[hit] - beta[hit] * phi[hit]
            out[hit, 2] = lim[hit]
        return out


# --- converter device -----------------------------------------------------------


def converter_commands(p, q, v, i_max, v_floor):
    """Current commands (active, reactive) in the voltage-aligned frame.

    The magnitude used for the division never drops below ``v_floor`` and the
    command vector is scaled back to ``i_max`` if it exceeds it.
    """
    vmag = np.maximum(np.abs(v), v_floor)
    cd, cq = p / vmag, -q / vmag
    mag = np.hypot(cd, cq)
    scale = np.where(mag > i_max, i_max / np.maximum(mag, 1e-300), 1.0)
    return cd * scale, cq * scale


def device_current(state, v, v_floor):
    """Injected current (i_d + j i_q) v / max(|v|, v_floor); tends to zero at a bolted fault."""
    state = np.asarray(state, dtype=float)
    return (state[..., 0] + 1j * state[..., 1]) * v / np.maximum(np.abs(v), v_floor)


def device_derivatives(dev: DeviceData, state, v):
    cd, cq = converter_commands(dev.p, dev.q, v, dev.i_max, dev.v_floor)
    return np.array([(cd - state[0]) / dev.tc, (cq - state[1]) / dev.tc])


def device_init(dev: DeviceData, v0: complex):
    cd, cq = converter_commands(dev.p, dev.q, v0, dev.i_max, dev.v_floor)
    return np.array([float(cd), float(cq)])


class ConverterGroup:
    names = ("id", "iq")

    def __init__(self, devs: list[DeviceData]):
        self.buses = [d.bus for d in devs]
        self.n = len(devs)
        col = lambda k: np.array([getattr(d, k) for d in devs], dtype=float)
        self.p, self.q, self.tc, self.i_max, self.v_floor = (col(k) for k in ("p", "q", "tc", "i_max", "v_floor"))
        if np.any(self.tc <= 0):
            raise ComponentError("converter time constant must be positive")

    def current(self, y, v):
        return device_current(y, v, self.v_floor)

    def derivatives(self, y, v):
        cd, cq = converter_commands(self.p, self.q, v, self.i_max, self.v_floor)
        return np.column_stack([(cd - y[:, 0]) / self.tc, (cq - y[:, 1]) / self.tc])

    def trap_sweep(self, y0, f0, y, v, h):
        """Exact: the commands depend on the port voltage only."""
        hh = 0.5 * h
        cd, cq = converter_commands(self.p, self.q, v, self.i_max, self.v_floor)
        out = np.empty_like(y)
        out[:, 0] = (y0[:, 0] + hh * (f0[:, 0] + cd / self.tc)) / (1.0 + hh / self.tc)
        out[:, 1] = (y0[:, 1] + hh * (f0[:, 1] + cq / self.tc)) / (1.0 + hh / self.tc)
        return out


# --- portal records ---------------------------------------------------------------


@dataclass(frozen=True)
class Port:
    """A component boundary to record or to replace with a neural model.

    kind "exciter": the exciter on generator ``bus``; "device": the converter
    at ``bus``; "region": the named regional subsystem (``bus`` is its
    boundary bus).
    """

    kind: str
    bus: int
    region: str | None = None

    def __post_init__(self):
        if self.kind not in ("exciter", "device", "region"):
            raise ComponentError(f"unknown port kind {self.kind!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.region or self.bus}"

    @classmethod
    def parse(cls, text: str, case: Case | None = None) -> "Port":
        """``exciter:3``, ``device:6`` or ``region:<name>``."""
        kind, _, arg = text.partition(":")
        if kind == "region":
            if case is None:
                raise ComponentError("resolving a region port needs the case")
            return cls("region", case.region(arg).boundary_bus, arg)
        try:
            return cls(kind, int(arg))
        except ValueError:
            raise ComponentError(f"bad port {text!r}; expected kind:bus") from None


def portal_dims(port: Port) -> dict[str, int]:
    if port.kind == "exciter":
        return {"dim_x": 1, "dim_i": 0, "dim_v": 0, "dim_z": 5}
    return {"dim_x": 0, "dim_i": 2, "dim_v": 2, "dim_z": 4}


def extract_portal(traj, port: Port):
    """Portal record of ``port`` from a simulated trajectory, as a TrajectorySample.

    exciter: x = [Efd], z = [V, Vs, V(0), Vs(0), Efd(0)].
    device/region: i = [i_x, i_y] injected at the port bus, v = [v_x, v_y],
    z = [v_x(0), v_y(0), i_x(0), i_y(0)].
    """
    from .samples import TrajectorySample

    K = len(traj.t)
    meta = {"port": port.label, "scenario": traj.meta.get("scenario")}
    empty = np.zeros((K, 0))
    if port.kind == "exciter":
        V = np.abs(traj.bus_voltage(port.bus))
        efd = traj.efd(port.bus)
        vs = np.zeros(K)
        z = np.column_stack([V, vs, np.full(K, V[0]), np.full(K, vs[0]), np.full(K, efd[0])])
        return TrajectorySample(traj.t, efd[:, None], empty, empty, z, list(traj.event_times), traj.stable,
                                traj.T_s, meta)
    v = traj.bus_voltage(port.bus)
    i = traj.port_current(port)
    vv = np.column_stack([v.real, v.imag])
    ii = np.column_stack([i.real, i.imag])
    z = np.tile(np.concatenate([vv[0], ii[0]]), (K, 1))
    return TrajectorySample(traj.t, empty, ii, vv, z, list(traj.event_times), traj.stable, traj.T_s, meta)
