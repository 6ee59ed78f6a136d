"""Newton power flow in polar coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cases import Case
from .network import NetworkError, build_admittance, bus_index


class PowerFlowError(NetworkError):
    pass


@dataclass
class PowerFlowResult:
    bus_ids: list[int]
    V: np.ndarray
    S_bus: np.ndarray  # net injection per bus
    p_gen: dict[int, float]
    q_gen: dict[int, float]
    iterations: int
    mismatch: float

    def voltage(self, bus: int) -> complex:
        return complex(self.V[self.bus_ids.index(bus)])

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "mismatch": self.mismatch,
            "buses": [
                {"id": b, "vm": float(abs(v)), "va_deg": float(np.degrees(np.angle(v))),
                 "p_inj": float(s.real), "q_inj": float(s.imag)}
                for b, v, s in zip(self.bus_ids, self.V, self.S_bus)
            ],
            "generators": [{"bus": b, "p": self.p_gen[b], "q": self.q_gen[b]} for b in sorted(self.p_gen)],
        }


def scheduled_injections(case: Case) -> np.ndarray:
    idx = bus_index(case.buses)
    S = np.zeros(len(case.buses), dtype=complex)
    for g in case.generators:
        S[idx[g.bus]] += g.p
    for ld in case.loads:
        S[idx[ld.bus]] -= complex(ld.p, ld.q)
    for dev in case.devices:
        S[idx[dev.bus]] += complex(dev.p, dev.q)
    return S


def _jacobian(Y, V):
    Ibus = Y @ V
    dV = np.diag(V)
    dS_dVa = 1j * dV @ np.conj(np.diag(Ibus) - Y @ dV)
    dS_dVm = dV @ np.conj(Y @ np.diag(V / np.abs(V))) + np.diag(np.conj(Ibus) * V / np.abs(V))
    return dS_dVa, dS_dVm


def newton_power_flow(case: Case, tol: float = 1e-8, max_iter: int = 50, v0=None, polish: bool = True) -> PowerFlowResult:
    """Solve the power flow; the slack bus absorbs the residual power.

    Once the mismatch is within ``tol`` up to a few extra iterations drive it
    toward roundoff, which gives dynamic initialization a clean equilibrium.
    """
    buses = case.buses
    n = len(buses)
    Y = build_admittance(buses, case.branches).toarray()
    kinds = [b.kind for b in buses]
    vset = {g.bus: g.vset for g in case.generators}
    for g in case.generators:
        if next(b for b in buses if b.id == g.bus).kind == "PQ":
            raise PowerFlowError(f"generator at PQ bus {g.bus}")
    if v0 is None:
        vm = np.array([vset.get(b.id, b.vm) if b.kind != "PQ" else 1.0 for b in buses])
        va = np.array([b.va if b.kind == "slack" else 0.0 for b in buses])
        V = vm * np.exp(1j * va)
    else:
        V = np.array(v0, dtype=complex)
        for k, b in enumerate(buses):
            if b.kind != "PQ":
                V[k] = vset.get(b.id, b.vm) * np.exp(1j * np.angle(V[k]))
    S_sch = scheduled_injections(case)
    pv = [k for k in range(n) if kinds[k] == "PV"]
    pq = [k for k in range(n) if kinds[k] == "PQ"]
    pvpq = pv + pq
    npvpq = len(pvpq)

    def mismatch(V):
        S = V * np.conj(Y @ V)
        d = S - S_sch
        F = np.concatenate([d.real[pvpq], d.imag[pq]])
        return F, (float(np.max(np.abs(F))) if F.size else 0.0)

    F, norm = mismatch(V)
    it = 0
    while norm > tol:
        if it >= max_iter or not np.isfinite(norm):
            raise PowerFlowError(f"power flow did not converge after {it} iterations (mismatch {norm:.3e})")
        V = _newton_step(Y, V, F, pvpq, pq, npvpq)
        F, norm = mismatch(V)
        it += 1
    if polish:
        for _ in range(3):
            if norm <= 1e-13 or not F.size:
                break
            V_new = _newton_step(Y, V, F, pvpq, pq, npvpq)
            F_new, norm_new = mismatch(V_new)
            if not norm_new < norm:
                break
            V, F, norm = V_new, F_new, norm_new
    S = V * np.conj(Y @ V)
    idx = bus_index(buses)
    p_gen, q_gen = {}, {}
    for g in case.generators:
        k = idx[g.bus]
        s_gen = S[k] - (S_sch[k] - g.p)
        p_gen[g.bus] = float(s_gen.real)
        q_gen[g.bus] = float(s_gen.imag)
    return PowerFlowResult([b.id for b in buses], V, S, p_gen, q_gen, it, norm)


def _newton_step(Y, V, F, pvpq, pq, npvpq):
    dS_dVa, dS_dVm = _jacobian(Y, V)
    J = np.block([
        [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
        [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
    ])
    try:
        dx = np.linalg.solve(J, -F)
    except np.linalg.LinAlgError as exc:
        raise PowerFlowError(f"singular power flow Jacobian: {exc}") from None
    va = np.angle(V)
    vm = np.abs(V)
    va[pvpq] += dx[:npvpq]
    vm[pq] += dx[npvpq:]
    return vm * np.exp(1j * va)
