"""Alternating-approach transient stability simulation.

Each step integrates the devices with the implicit trapezoidal rule at a
trial voltage, recomputes the injections and re-solves the network, and
repeats until the voltage update is below tolerance. Hosted neural models
advance with explicit Euler; a neural current source is stamped as
``i' = i + jB' v`` with ``+jB'`` on its diagonal, which leaves the converged
voltages unchanged while keeping the network equations diagonally dominant.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .components import (
    ConverterGroup,
    ExciterGroup,
    GeneratorGroup,
    Port,
    exciter_init,
    generator_init,
    device_init,
    portal_dims,
)
from .grid.cases import Case
from .grid.network import NetworkEvent, NetworkModel, apply_event
from .grid.powerflow import newton_power_flow
from .neural.models import NeuralModel

log = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "neurogrid-trajectory/1"
DEFAULT_B_PRIME = -50.0


class SimulationError(RuntimeError):
    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class ConvergenceError(SimulationError):
    pass


@dataclass
class SimulationConfig:
    dt: float = 0.01
    T: float = 10.0
    v_tol: float = 1e-6
    max_iter: int = 20
    device_tol: float = 1e-8
    device_max_iter: int = 10
    accelerate: bool = True
    predictor: str = "linear"
    stop_at_instability: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.v_tol > 0 or not self.device_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.predictor not in ("hold", "linear"):
            raise ValueError("predictor must be 'hold' or 'linear'")
        if self.max_iter < 1 or self.device_max_iter < 1:
            raise ValueError("iteration limits must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


# --- hosting -----------------------------------------------------------------------


@dataclass
class HostEntry:
    port: Port
    model: NeuralModel
    b_prime: float = DEFAULT_B_PRIME


def check_bundle_fits(port: Port, model: NeuralModel) -> None:
    dims = portal_dims(port)
    io = model.io
    if port.kind == "exciter":
        if model.is_dae or io.dim_x != dims["dim_x"] or io.dim_z != dims["dim_z"]:
            raise ValueError(f"{port.label} needs an ODE-E model with dim_x=1, dim_z=5; got {io.to_dict()}")
    else:
        if not model.is_dae or io.dim_i != 2 or io.dim_v != 2 or io.dim_z != 4:
            raise ValueError(f"{port.label} needs a DAE model with dim_i=dim_v=2, dim_z=4; got {io.to_dict()}")
        if not model.has_learner:
            raise ValueError(f"{port.label}: hosted DAE models need an initial value learner")


class ModelHost:
    """Binds each port of a case to its analytical model or to a neural model."""

    def __init__(self, case: Case):
        self.case = case
        self.entries: dict[Port, HostEntry] = {}

    def bind(self, port: Port, model: NeuralModel, b_prime: float = DEFAULT_B_PRIME) -> "ModelHost":
        check_bundle_fits(port, model)
        if port.kind != "exciter" and not b_prime <= 0:
            raise ValueError("the fictitious susceptance must be negative (or zero to disable it)")
        if port in self.entries:
            raise ValueError(f"{port.label} is already bound")
        if port.kind == "exciter":
            self.case.exciter(port.bus)
        elif port.kind == "device":
            if port.bus not in [d.bus for d in self.case.devices]:
                raise ValueError(f"no device at bus {port.bus}")
        else:
            self.case.region(port.region)
        self.entries[port] = HostEntry(port, model, b_prime)
        return self

    def unbind(self, port: Port) -> "ModelHost":
        self.entries.pop(port)
        return self

    def effective_case(self) -> Case:
        case = self.case
        for entry in self.entries.values():
            if entry.port.kind == "region":
                case = case.without_region(entry.port.region)
        return case

    def network(self) -> NetworkModel:
        case = self.effective_case()
        net = NetworkModel(case.buses, case.branches, case.base_mva)
        return net


def host_neural_model(host: ModelHost | Case, port: Port, model: NeuralModel, b_prime: float = DEFAULT_B_PRIME):
    if isinstance(host, Case):
        host = ModelHost(host)
    return host.bind(port, model, b_prime)


# --- neural hosts inside a run ---------------------------------------------------------


class _NeuralExciter:
    def __init__(self, model: NeuralModel, gen_idx: int, V0: float, efd0: float):
        self.model = model
        self.gen_idx = gen_idx
        self.V0, self.efd0 = V0, efd0
        self.X = model.encode("x", np.array([efd0]))
        self.efd = efd0

    def step(self, V: float, h: float) -> float:
        z = self.model.encode("z", np.array([V, 0.0, self.V0, 0.0, self.efd0]))
        self.X = self.X + h * self.model.derivative(self.X, z)
        self.efd = float(self.model.decode("x", self.X)[0])
        if not math.isfinite(self.efd):
            raise SimulationError("neural exciter produced a non-finite output")
        return self.efd


class _NeuralDae:
    def __init__(self, model: NeuralModel, bus_idx: int, b_prime: float, v0: complex, i0: complex):
        self.model = model
        self.bus_idx = bus_idx
        self.b_prime = b_prime
        self.v0, self.i0 = v0, i0
        vv = np.array([v0.real, v0.imag])
        ii = np.array([i0.real, i0.imag])
        z0 = np.concatenate([vv, ii])
        self.Zc = model.encode("z", z0)
        x0 = model.learn_initial_state(ii, vv, z0)
        self.X = model.encode("x", x0)
        self.I_start = model.encode("i", ii)  # hidden current used by the first step
        self.use_initial = True

    def hidden_current(self, v: complex):
        vc = self.model.encode("v", np.array([v.real, v.imag]))
        return self.model.current(self.X, vc, self.Zc)

    def current(self, v: complex) -> complex:
        if self.use_initial:
            return self.i0
        ic = self.model.decode("i", self.hidden_current(v))
        return complex(ic[0], ic[1])

    def step(self, v: complex, h: float) -> None:
        vc = self.model.encode("v", np.array([v.real, v.imag]))
        I = self.I_start if self.use_initial else self.model.current(self.X, vc, self.Zc)
        self.X = self.X + h * self.model.derivative(self.X, self.Zc, I, vc)
        self.use_initial = False
        if not np.all(np.isfinite(self.X)):
            raise SimulationError("neural DAE state became non-finite")


# --- trajectory ----------------------------------------------------------------------


@dataclass
class SystemTrajectory:
    t: np.ndarray
    bus_ids: list[int]
    V: np.ndarray  # (K, n_bus) complex
    gen_buses: list[int]
    gen_states: np.ndarray  # (K, n_gen, 4)
    gen_efd: np.ndarray  # (K, n_gen)
    gen_online: np.ndarray  # (K, n_gen)
    exc_buses: list[int]
    exc_states: np.ndarray  # (K, n_exc, 4)
    dev_buses: list[int]
    dev_states: np.ndarray  # (K, n_dev, 2)
    dev_current: np.ndarray  # (K, n_dev) complex
    neural_current: dict[int, np.ndarray]  # bus -> (K,) complex
    region_current: dict[str, np.ndarray]
    event_times: list[float]
    event_log: list[dict]
    stable: bool
    T_s: float | None
    iterations: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def bus_voltage(self, bus: int) -> np.ndarray:
        return self.V[:, self.bus_ids.index(bus)]

    def efd(self, gen_bus: int) -> np.ndarray:
        return self.gen_efd[:, self.gen_buses.index(gen_bus)]

    def angles(self) -> np.ndarray:
        return self.gen_states[:, :, 0]

    def port_current(self, port: Port) -> np.ndarray:
        if port.bus in self.neural_current and port.kind != "exciter":
            return self.neural_current[port.bus]
        if port.kind == "device":
            return self.dev_current[:, self.dev_buses.index(port.bus)]
        if port.kind == "region":
            return self.region_current[port.region]
        raise KeyError(port.label)

    def columns(self) -> dict[str, np.ndarray]:
        cols: dict[str, np.ndarray] = {}
        for k, b in enumerate(self.bus_ids):
            cols[f"vm_{b}"] = np.abs(self.V[:, k])
            cols[f"va_{b}"] = np.angle(self.V[:, k])
        for k, b in enumerate(self.gen_buses):
            for j, name in enumerate(GeneratorGroup.names):
                cols[f"gen{b}_{name}"] = self.gen_states[:, k, j]
            cols[f"gen{b}_efd"] = self.gen_efd[:, k]
        for k, b in enumerate(self.exc_buses):
            for j, name in enumerate(ExciterGroup.names):
                cols[f"exc{b}_{name}"] = self.exc_states[:, k, j]
        for k, b in enumerate(self.dev_buses):
            cols[f"dev{b}_ix"] = self.dev_current[:, k].real
            cols[f"dev{b}_iy"] = self.dev_current[:, k].imag
        for b, cur in sorted(self.neural_current.items()):
            cols[f"neural{b}_ix"] = cur.real
            cols[f"neural{b}_iy"] = cur.imag
        for name, cur in sorted(self.region_current.items()):
            cols[f"{name}_ix"] = cur.real
            cols[f"{name}_iy"] = cur.imag
        return cols

    def to_csv(self, path) -> None:
        cols = self.columns()
        marks = np.zeros(len(self.t), dtype=int)
        dt = self.t[1] - self.t[0] if len(self.t) > 1 else 1.0
        for te in self.event_times:
            k = int(round(te / dt))
            if 0 <= k < len(marks):
                marks[k] = 1
        with open(path, "w", newline="") as fh:
            fh.write(f"# format: {TRAJECTORY_FORMAT}\n")
            fh.write(f"# stable: {self.stable}; T_s: {self.T_s}\n")
            w = csv.writer(fh)
            w.writerow(["t", *cols, "event"])
            for k in range(len(self.t)):
                w.writerow([f"{self.t[k]:.6f}", *(repr(float(c[k])) for c in cols.values()), int(marks[k])])


def detect_instability(angles: np.ndarray, t: np.ndarray, online: np.ndarray | None = None) -> float | None:
    """First instant where the largest pairwise rotor-angle difference exceeds 360 degrees."""
    angles = np.asarray(angles, dtype=float)
    if angles.ndim != 2 or angles.shape[1] < 2:
        return None
    if online is not None:
        masked_hi = np.where(online, angles, -np.inf).max(axis=1)
        masked_lo = np.where(online, angles, np.inf).min(axis=1)
        spread = masked_hi - masked_lo
    else:
        spread = angles.max(axis=1) - angles.min(axis=1)
    hit = np.nonzero(spread > 2.0 * math.pi)[0]
    return float(t[hit[0]]) if hit.size else None


# --- simulator core --------------------------------------------------------------------


class Simulation:
    def __init__(self, case: Case | ModelHost, cfg: SimulationConfig | None = None):
        self.host = case if isinstance(case, ModelHost) else ModelHost(case)
        self.cfg = cfg or SimulationConfig()
        self.case = self.host.effective_case()
        self._setup()

    # -- initialization -------------------------------------------------------------

    def _setup(self):
        case, host = self.case, self.host
        full_pf = newton_power_flow(host.case)
        pf_index = {b: k for k, b in enumerate(full_pf.bus_ids)}
        self.net = host.network()
        net = self.net
        idx = net.index
        V0 = np.array([full_pf.V[pf_index[b]] for b in net.bus_ids])
        self.V0 = V0

        for ld in case.loads:
            k = idx[ld.bus]
            net.set_shunt("load", ld.bus, complex(ld.p, -ld.q) / abs(V0[k]) ** 2)

        self.port_devs = {e.port.bus for e in host.entries.values() if e.port.kind == "device"}
        neural_exc = {e.port.bus: e for e in host.entries.values() if e.port.kind == "exciter"}
        dae_entries = [e for e in host.entries.values() if e.port.kind != "exciter"]

        devs = [d for d in case.devices if d.bus not in self.port_devs]
        self.devs = ConverterGroup(devs)
        self.dev_idx = np.array([idx[d.bus] for d in devs], dtype=int)
        self.dev_y = np.array([device_init(d, V0[idx[d.bus]]) for d in devs]).reshape(-1, 2)

        # net current each bus must supply at the initial voltages
        I_need = net.Y @ V0
        dev_i0 = self.devs.current(self.dev_y, V0[self.dev_idx]) if devs else np.zeros(0, complex)
        np.subtract.at(I_need, self.dev_idx, dev_i0)

        self.gens = GeneratorGroup(case.generators, case.frequency_hz)
        self.gen_idx = np.array([idx[g.bus] for g in case.generators], dtype=int)
        self.gen_y = np.zeros((self.gens.n, 4))
        self.efd0 = np.zeros(self.gens.n)
        for k, g in enumerate(case.generators):
            self.gen_y[k], self.gens.pm[k], self.efd0[k] = generator_init(g, V0[idx[g.bus]], I_need[idx[g.bus]])
            net.set_shunt("gen", g.bus, self.gens.y_norton[k])

        excs = [e for e in case.exciters if e.gen_bus not in neural_exc]
        self.excs = ExciterGroup(excs)
        gen_pos = {b: k for k, b in enumerate(self.gens.buses)}
        self.exc_gen = np.array([gen_pos[e.gen_bus] for e in excs], dtype=int)
        self._vs = np.zeros(self.excs.n)  # no stabilizer signal
        self.exc_y = np.zeros((self.excs.n, 4))
        for k, e in enumerate(excs):
            g = self.exc_gen[k]
            refs = exciter_init(e, abs(V0[self.gen_idx[g]]), self.efd0[g])
            self.excs.vref[k], self.excs.efd_ref[k] = refs.vref, refs.efd_ref
            self.exc_y[k] = refs.state
        self.neural_exc = [
            _NeuralExciter(ent.model, gen_pos[b], abs(V0[self.gen_idx[gen_pos[b]]]), self.efd0[gen_pos[b]])
            for b, ent in sorted(neural_exc.items())
        ]

        self.neural_dae = []
        for ent in dae_entries:
            b = ent.port.bus
            k = idx[b]
            i0 = complex(I_need[k]) if ent.port.kind == "region" else self._device_i0(ent.port, V0)
            self.neural_dae.append(_NeuralDae(ent.model, k, ent.b_prime, complex(V0[k]), i0))
            if ent.b_prime:
                net.set_shunt("neural", b, 1j * ent.b_prime)

        self.regions = []
        for reg in case.regions:
            a, b = reg.boundary_branch
            inner = b if a == reg.boundary_bus else a
            self.regions.append((reg.name, net.find_branch(reg.boundary_bus, inner), reg.boundary_bus))

        self.efd = self.efd0.copy()
        for k, g in enumerate(self.exc_gen):
            self.efd[g] = self.exc_y[k, 2]
        # the network solve must reproduce the initial voltages; this also
        # validates the factorization before stepping
        self.V = V0.copy()

    def _device_i0(self, port: Port, V0):
        dev = next(d for d in self.host.case.devices if d.bus == port.bus)
        y = device_init(dev, V0[self.net.index[port.bus]])
        cd, cq = y
        v = V0[self.net.index[port.bus]]
        return complex((cd + 1j * cq) * v / max(abs(v), dev.v_floor))

    # -- algebraic part ---------------------------------------------------------------

    def injections(self, gen_y, dev_y, V, neural_i=None):
        I = np.zeros(self.net.n, dtype=complex)
        gi = self.gens.current(gen_y, V[self.gen_idx]) + np.where(
            self.gens.online, self.gens.y_norton * V[self.gen_idx], 0j
        )
        np.add.at(I, self.gen_idx, gi)
        if self.devs.n:
            np.add.at(I, self.dev_idx, self.devs.current(dev_y, V[self.dev_idx]))
        for k, host in enumerate(self.neural_dae):
            i = host.current(V[host.bus_idx]) if neural_i is None else neural_i[k]
            I[host.bus_idx] += i + 1j * host.b_prime * V[host.bus_idx]
        return I

    def _device_step(self, y0s, f0s, guess, V, efd_neural, h):
        """Trapezoidal states of every analytical device at trial voltage ``V``."""
        gen_y0, exc_y0, dev_y0 = y0s
        gen_f0, exc_f0, dev_f0 = f0s
        gen_y, exc_y, dev_y = guess
        vg = V[self.gen_idx]
        vmag = np.abs(vg[self.exc_gen]) if self.excs.n else None
        cfg = self.cfg
        if self.excs.n:
            exc_y = self.excs.trap_sweep(exc_y0, exc_f0, exc_y, vmag, self._vs, h)
        efd = efd_neural.copy()
        if self.excs.n:
            efd[self.exc_gen] = exc_y[:, 2]
        for _ in range(cfg.device_max_iter):
            new = self.gens.trap_sweep(gen_y0, gen_f0, gen_y, vg, efd, h)
            change = float(np.max(np.abs(new - gen_y)))
            gen_y = new
            if change <= cfg.device_tol:
                break
        if self.devs.n:
            dev_y = self.devs.trap_sweep(dev_y0, dev_f0, dev_y, V[self.dev_idx], h)
        return gen_y, exc_y, dev_y, efd

    def _fixed_point(self, G, V, t):
        """Iterate V <- G(V) until the update is within tolerance.

        With ``accelerate`` on, a type-II Anderson mixing of depth 3 is applied
        to the real-stacked voltage vector.
        """
        cfg = self.cfg
        hist_x, hist_g = [], []
        for it in range(1, cfg.max_iter + 1):
            GV, aux = G(V)
            dv = float(np.max(np.abs(GV - V)))
            if not np.isfinite(dv):
                raise ConvergenceError(f"non-finite voltages during the network iteration at t={t:.3f}s", t)
            if dv <= cfg.v_tol:
                return GV, aux, it
            if cfg.accelerate:
                x = np.concatenate([V.real, V.imag])
                g = np.concatenate([GV.real, GV.imag])
                hist_x.append(x)
                hist_g.append(g)
                if len(hist_x) > 4:
                    hist_x.pop(0)
                    hist_g.pop(0)
                V = _anderson(hist_x, hist_g)
                V = V[: self.net.n] + 1j * V[self.net.n :]
            else:
                V = GV
        raise ConvergenceError(
            f"alternating iteration did not converge at t={t:.3f}s "
            f"(last |dV| = {dv:.3e} after {cfg.max_iter} iterations)",
            t,
        )

    # -- main loop --------------------------------------------------------------------

    def run(self, events: Sequence[NetworkEvent] = (), meta: dict | None = None) -> SystemTrajectory:
        cfg = self.cfg
        h = cfg.dt
        K = cfg.n_steps + 1
        t = np.arange(K) * h
        events = sorted(events, key=lambda e: e.time)
        by_step: dict[int, list[NetworkEvent]] = {}
        for ev in events:
            k = int(round(ev.time / h))
            if ev.time > cfg.T + 1e-9:
                raise SimulationError(f"event at {ev.time}s lies beyond the horizon")
            by_step.setdefault(k, []).append(ev)

        nb, ng, ne, nd = self.net.n, self.gens.n, self.excs.n, self.devs.n
        Vrec = np.zeros((K, nb), complex)
        G = np.zeros((K, ng, 4))
        EF = np.zeros((K, ng))
        ON = np.zeros((K, ng), bool)
        EX = np.zeros((K, ne, 4))
        DV = np.zeros((K, nd, 2))
        DI = np.zeros((K, nd), complex)
        NI = {self.net.bus_ids[hst.bus_idx]: np.zeros(K, complex) for hst in self.neural_dae}
        RI = {name: np.zeros(K, complex) for name, _, _ in self.regions}
        iters = np.zeros(K, dtype=int)

        gen_y, exc_y, dev_y = self.gen_y.copy(), self.exc_y.copy(), self.dev_y.copy()
        V = self.V.copy()
        efd_neural = self.efd0.copy()
        for host in self.neural_exc:
            efd_neural[host.gen_idx] = host.efd
        event_times: list[float] = []
        event_log: list[dict] = []
        T_s = None
        last = K - 1
        V_prev = None

        def record(k, V, neural_i):
            Vrec[k] = V
            G[k] = gen_y
            EF[k] = self._merge_efd(exc_y, efd_neural)
            ON[k] = self.gens.online
            EX[k] = exc_y
            DV[k] = dev_y
            if nd:
                DI[k] = self.devs.current(dev_y, V[self.dev_idx])
            for j, hst in enumerate(self.neural_dae):
                NI[self.net.bus_ids[hst.bus_idx]][k] = neural_i[j]
            for name, br, bus in self.regions:
                i_from, i_to = self.net.branch_current(br, V)
                leaving = i_from if self.net.branches[br].from_bus == bus else i_to
                RI[name][k] = -leaving

        def algebraic(V):
            ni = [hst.current(V[hst.bus_idx]) for hst in self.neural_dae]
            I = self.injections(gen_y, dev_y, V, ni)
            return self.net.solve(I), ni

        V, neural_i, it0 = self._fixed_point(algebraic, V, 0.0)
        iters[0] = it0
        for k in range(K):
            record(k, V, neural_i)
            if cfg.stop_at_instability and ng > 1:
                delta = gen_y[:, 0][self.gens.online]
                if delta.size > 1 and delta.max() - delta.min() > 2.0 * math.pi:
                    T_s = float(t[k])
                    last = k
                    break
            if k == K - 1:
                break
            # (1) events at t_k, then re-solve with the devices frozen
            if k in by_step:
                for ev in by_step[k]:
                    self._apply(ev)
                    event_log.append(ev.to_dict())
                event_times.append(float(t[k]))
                if k == 0:
                    for hst in self.neural_dae:
                        hst.use_initial = False
                V, neural_i, _ = self._fixed_point(algebraic, V, t[k])
            efd_start = self._merge_efd(exc_y, efd_neural)
            # (2) neural models advance explicitly from the post-event state
            for hst in self.neural_exc:
                efd_neural[hst.gen_idx] = hst.step(abs(V[self.gen_idx[hst.gen_idx]]), h)
            for hst in self.neural_dae:
                hst.step(V[hst.bus_idx], h)
            # (3) trapezoidal devices + network, alternating
            y0s = (gen_y, exc_y, dev_y)
            vg = V[self.gen_idx]
            f0s = (
                self.gens.derivatives(gen_y, vg, efd_start),
                self.excs.derivatives(exc_y, np.abs(vg[self.exc_gen]), np.zeros(ne)) if ne else exc_y,
                self.devs.derivatives(dev_y, V[self.dev_idx]) if nd else dev_y,
            )
            guess = [gen_y, exc_y, dev_y]

            def step_map(Vt, y0s=y0s, f0s=f0s, guess=guess):
                g, e, d, _ = self._device_step(y0s, f0s, tuple(guess), Vt, efd_neural, h)
                guess[:] = [g, e, d]
                ni = [hst.current(Vt[hst.bus_idx]) for hst in self.neural_dae]
                I = self.injections(g, d, Vt, ni)
                return self.net.solve(I), (g, e, d, ni)

            guess_V = V
            if cfg.predictor == "linear" and V_prev is not None and k not in by_step:
                guess_V = 2.0 * V - V_prev
            V_prev = V
            V, (gen_y, exc_y, dev_y, neural_i), iters[k + 1] = self._fixed_point(step_map, guess_V, t[k + 1])

        n = last + 1
        stable = T_s is None
        if T_s is None and ng > 1:
            T_s = detect_instability(G[:n, :, 0], t[:n], ON[:n])
            stable = T_s is None
        return SystemTrajectory(
            t[:n], list(self.net.bus_ids), Vrec[:n], list(self.gens.buses), G[:n], EF[:n], ON[:n],
            list(self.excs.gen_buses), EX[:n], list(self.devs.buses), DV[:n], DI[:n],
            {b: a[:n] for b, a in NI.items()}, {nm: a[:n] for nm, a in RI.items()},
            event_times, event_log, stable, T_s, iters[:n], dict(meta or {}),
        )

    def _merge_efd(self, exc_y, efd_neural):
        efd = np.array(efd_neural, dtype=float)
        if self.excs.n:
            efd[self.exc_gen] = exc_y[:, 2]
        return efd

    def _apply(self, ev: NetworkEvent):
        if ev.kind == "gen_trip":
            if ev.bus not in self.gens.buses:
                raise SimulationError(f"no generator at bus {ev.bus}")
            self.gens.online[self.gens.buses.index(ev.bus)] = False
        elif ev.kind == "gen_scale":
            if ev.bus not in self.gens.buses:
                raise SimulationError(f"no generator at bus {ev.bus}")
            self.gens.pm[self.gens.buses.index(ev.bus)] *= ev.factor
        apply_event(self.net, ev)


def _anderson(xs, gs):
    f = [g - x for g, x in zip(gs, xs)]
    m = len(f)
    if m == 1:
        return gs[-1]
    dF = np.column_stack([f[j + 1] - f[j] for j in range(m - 1)])
    dG = np.column_stack([gs[j + 1] - gs[j] for j in range(m - 1)])
    gamma, *_ = np.linalg.lstsq(dF, f[-1], rcond=None)
    return gs[-1] - dG @ gamma


def simulate(
    case: Case | ModelHost,
    events: Sequence[NetworkEvent] = (),
    cfg: SimulationConfig | None = None,
    meta: dict | None = None,
) -> SystemTrajectory:
    return Simulation(case, cfg).run(events, meta)


# --- comparison -----------------------------------------------------------------------


@dataclass
class Comparison:
    delta_x: dict[str, float]
    delta_Ts: float
    agree: bool
    n_compared: int
    stable_orig: bool
    stable_neural: bool
    T_s_orig: float | None
    T_s_neural: float | None


def compare_trajectories(original: SystemTrajectory, neural: SystemTrajectory, keys: dict[str, tuple] | None = None):
    """Mean absolute difference per step of the key variables, before either run loses stability.

    ``keys`` maps a label to ("efd", gen_bus) | ("vm", bus) | ("current", Port) | ("delta", gen_bus).
    """
    n = min(len(original.t), len(neural.t))
    if n == 0 or not np.allclose(original.t[:n], neural.t[:n]):
        raise ValueError("trajectories are not on the same grid")
    for tr in (original, neural):
        if tr.T_s is not None:
            n = min(n, int(np.searchsorted(tr.t, tr.T_s - 1e-9)))
    keys = keys or {f"efd_{b}": ("efd", b) for b in original.gen_buses}
    out = {}
    for label, spec in keys.items():
        a, b = _series(original, spec)[:n], _series(neural, spec)[:n]
        d = np.abs(a - b)
        out[label] = float(d.mean()) if n else 0.0
    if original.stable and neural.stable:
        dts = 0.0
    elif not original.stable and not neural.stable:
        dts = abs(original.T_s - neural.T_s)
    else:
        dts = float("nan")
    return Comparison(out, dts, original.stable == neural.stable, n, original.stable, neural.stable,
                      original.T_s, neural.T_s)


def _series(tr: SystemTrajectory, spec):
    kind, arg = spec
    if kind == "efd":
        return tr.efd(arg)
    if kind == "vm":
        return np.abs(tr.bus_voltage(arg))
    if kind == "delta":
        return tr.gen_states[:, tr.gen_buses.index(arg), 0]
    if kind == "current":
        return tr.port_current(arg)  # complex, so the difference is the phasor distance
    if kind == "current_x":
        return tr.port_current(arg).real
    if kind == "current_y":
        return tr.port_current(arg).imag
    raise ValueError(f"unknown comparison key {kind!r}")
