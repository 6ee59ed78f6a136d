"""Buses, branches, admittance assembly and the complex network solve."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

BUS_KINDS = ("slack", "PV", "PQ")
FAULT_ADMITTANCE = -1e6j
EVENT_KINDS = ("fault_apply", "fault_clear", "branch_trip", "load_scale", "gen_trip", "gen_scale")


class NetworkError(ValueError):
    pass


class SingularNetworkError(NetworkError):
    def __init__(self, message: str, pivot: int, bus_id: int | None = None):
        super().__init__(message)
        self.pivot = pivot
        self.bus_id = bus_id


@dataclass
class Bus:
    id: int
    kind: str = "PQ"
    vm: float = 1.0
    va: float = 0.0
    g_sh: float = 0.0
    b_sh: float = 0.0

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise NetworkError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.vm > 0:
            raise NetworkError(f"bus {self.id}: voltage magnitude must be positive")

    @property
    def shunt(self) -> complex:
        return complex(self.g_sh, self.b_sh)


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float = 0.0
    b: float = 0.0
    tap: float = 1.0

    def __post_init__(self):
        if self.r == 0 and self.x == 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} has zero impedance")
        if not self.tap > 0:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus}: tap must be positive")

    def stamps(self) -> tuple[complex, complex, complex, complex]:
        """(Y_ff, Y_ft, Y_tf, Y_tt) of the pi model, tap on the from side."""
        y = 1.0 / complex(self.r, self.x)
        ch = 0.5j * self.b
        t = self.tap
        return (y + ch) / (t * t), -y / t, -y / t, y + ch


def bus_index(buses) -> dict[int, int]:
    idx = {}
    for k, bus in enumerate(buses):
        if bus.id in idx:
            raise NetworkError(f"duplicate bus id {bus.id}")
        idx[bus.id] = k
    return idx


def build_admittance(buses, branches, extra_diag: np.ndarray | None = None) -> sp.csr_matrix:
    """Assemble Y from pi-model branches and bus shunts (plus an optional diagonal)."""
    idx = bus_index(buses)
    n = len(buses)
    rows, cols, vals = [], [], []
    for br in branches:
        try:
            f, t = idx[br.from_bus], idx[br.to_bus]
        except KeyError as exc:
            raise NetworkError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {exc}") from None
        yff, yft, ytf, ytt = br.stamps()
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    diag = np.array([b.shunt for b in buses], dtype=complex)
    if extra_diag is not None:
        diag = diag + extra_diag
    for k in range(n):
        if diag[k] != 0:
            rows.append(k)
            cols.append(k)
            vals.append(diag[k])
    # coo->csr sums duplicates in input order, so assembly is deterministic
    return sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()


def solve_network(Y, injections, factor=None, bus_ids=None, rtol: float = 1e-13):
    """Solve Y V = I by dense LU with partial pivoting.

    ``factor`` may be a cached ``scipy.linalg.lu_factor`` result for this Y.
    Returns ``(V, factor)``.
    """
    I = np.asarray(injections, dtype=complex)
    if factor is None:
        factor = factorize(Y, bus_ids, rtol)
    return sla.lu_solve(factor, I), factor


def factorize(Y, bus_ids=None, rtol: float = 1e-13):
    A = Y.toarray() if sp.issparse(Y) else np.asarray(Y, dtype=complex)
    if A.size == 0:
        raise SingularNetworkError("empty network", -1)
    scale = np.abs(A).max()
    if scale == 0:
        raise SingularNetworkError("admittance matrix is zero", 0, None if bus_ids is None else bus_ids[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)  # singularity is judged below
        lu, piv = sla.lu_factor(A, check_finite=True)
    d = np.abs(np.diag(lu))
    k = int(np.argmin(d))
    if d[k] <= rtol * scale:
        bus = None if bus_ids is None else bus_ids[k]
        raise SingularNetworkError(
            f"admittance matrix is numerically singular at pivot {k}"
            + (f" (bus {bus})" if bus is not None else "")
            + f": |u_kk| = {d[k]:.3e}",
            k,
            bus,
        )
    return lu, piv


@dataclass
class NetworkEvent:
    time: float
    kind: str
    bus: int | None = None
    branch: int | None = None
    factor: float | None = None
    admittance: complex | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise NetworkError(f"unknown event kind {self.kind!r}")
        if not np.isfinite(self.time) or self.time < 0:
            raise NetworkError("event time must be finite and nonnegative")
        needs_bus = self.kind in ("fault_apply", "fault_clear", "load_scale", "gen_trip", "gen_scale")
        if needs_bus and self.bus is None:
            raise NetworkError(f"{self.kind} event needs a bus")
        if self.kind == "branch_trip" and self.branch is None:
            raise NetworkError("branch_trip event needs a branch index")
        if self.kind in ("load_scale", "gen_scale") and (self.factor is None or self.factor < 0):
            raise NetworkError(f"{self.kind} event needs a nonnegative factor")
        if isinstance(self.admittance, (list, tuple)):
            self.admittance = complex(*self.admittance)

    def to_dict(self) -> dict:
        d = {"time": self.time, "kind": self.kind}
        for key in ("bus", "branch", "factor"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.admittance is not None:
            d["admittance"] = [self.admittance.real, self.admittance.imag]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkEvent":
        return cls(**d)


class NetworkModel:
    """Mutable network state for one simulation.

    Y is rebuilt from bookkeeping whenever something changes: the branch
    matrix plus named diagonal layers ("load", "gen", "fault", "neural", ...),
    summed in sorted layer order so inverse edits restore Y bit for bit.
    """

    def __init__(self, buses, branches, base_mva: float = 100.0):
        self.buses = list(buses)
        self.branches = list(branches)
        self.base_mva = base_mva
        self.index = bus_index(self.buses)
        self.bus_ids = [b.id for b in self.buses]
        self.in_service = [True] * len(self.branches)
        self.layers: dict[str, dict[int, complex]] = {}
        self.tripped_gens: set[int] = set()
        self._Y = None
        self._factor = None

    @property
    def n(self) -> int:
        return len(self.buses)

    def copy(self) -> "NetworkModel":
        net = NetworkModel(self.buses, self.branches, self.base_mva)
        net.in_service = list(self.in_service)
        net.layers = {k: dict(v) for k, v in self.layers.items()}
        net.tripped_gens = set(self.tripped_gens)
        return net

    def _invalidate(self):
        self._Y = None
        self._factor = None

    def _check_bus(self, bus: int) -> int:
        if bus not in self.index:
            raise NetworkError(f"unknown bus {bus}")
        return self.index[bus]

    def set_shunt(self, layer: str, bus: int, y: complex) -> None:
        self._check_bus(bus)
        self.layers.setdefault(layer, {})[bus] = complex(y)
        self._invalidate()

    def clear_shunt(self, layer: str, bus: int) -> None:
        entries = self.layers.get(layer, {})
        if bus in entries:
            del entries[bus]
            self._invalidate()

    def shunt(self, layer: str, bus: int) -> complex:
        return self.layers.get(layer, {}).get(bus, 0j)

    def diag_extra(self) -> np.ndarray:
        d = np.zeros(self.n, dtype=complex)
        for layer in sorted(self.layers):
            for bus, y in sorted(self.layers[layer].items()):
                d[self.index[bus]] += y
        return d

    @property
    def Y(self) -> sp.csr_matrix:
        if self._Y is None:
            live = [br for br, on in zip(self.branches, self.in_service) if on]
            self._Y = build_admittance(self.buses, live, self.diag_extra())
        return self._Y

    def solve(self, injections) -> np.ndarray:
        if self._factor is None:
            self._factor = factorize(self.Y, self.bus_ids)
        V, _ = solve_network(self.Y, injections, self._factor)
        return V

    def residual(self, V, injections) -> float:
        return float(np.max(np.abs(self.Y @ V - injections))) if self.n else 0.0

    def branch_current(self, k: int, V) -> tuple[complex, complex]:
        """Currents leaving the from and to buses into branch ``k``."""
        br = self.branches[k]
        if not self.in_service[k]:
            return 0j, 0j
        yff, yft, ytf, ytt = br.stamps()
        vf, vt = V[self.index[br.from_bus]], V[self.index[br.to_bus]]
        return yff * vf + yft * vt, ytf * vf + ytt * vt

    def find_branch(self, a: int, b: int) -> int:
        for k, br in enumerate(self.branches):
            if {br.from_bus, br.to_bus} == {a, b}:
                return k
        raise NetworkError(f"no branch between buses {a} and {b}")


def apply_event(net: NetworkModel, event: NetworkEvent) -> NetworkModel:
    """Edit ``net`` in place. Generator-side effects are handled by the simulator."""
    kind = event.kind
    if kind == "fault_apply":
        net.set_shunt("fault", event.bus, FAULT_ADMITTANCE if event.admittance is None else event.admittance)
    elif kind == "fault_clear":
        net._check_bus(event.bus)
        if event.bus not in net.layers.get("fault", {}):
            raise NetworkError(f"no fault at bus {event.bus} to clear")
        net.clear_shunt("fault", event.bus)
    elif kind == "branch_trip":
        if not 0 <= event.branch < len(net.branches):
            raise NetworkError(f"unknown branch index {event.branch}")
        if net.in_service[event.branch]:
            net.in_service[event.branch] = False
            net._invalidate()
    elif kind == "load_scale":
        net._check_bus(event.bus)
        loads = net.layers.get("load", {})
        if event.bus not in loads:
            raise NetworkError(f"no load at bus {event.bus}")
        if event.factor != 1.0:
            net.set_shunt("load", event.bus, loads[event.bus] * event.factor)
    elif kind in ("gen_trip", "gen_scale"):
        net._check_bus(event.bus)
        if kind == "gen_trip":
            net.tripped_gens.add(event.bus)
            net.clear_shunt("gen", event.bus)
    return net
