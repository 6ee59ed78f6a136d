"""Case files: network data plus the dynamic component parameter blocks.

Field names::

    {name, base_mva, frequency_hz,
     buses:      [{id, kind, vm, va, g_sh, b_sh}],
     branches:   [{from, to, r, x, b, tap}],
     generators: [{bus, p, vset, p_min, p_max, H, D, xd, xq, xd_p, xq_p, Td0_p, Tq0_p}],
     loads:      [{bus, p, q}],
     exciters:   [{gen_bus, profile, km, tm, ka, ta, ke, te, kf, tf, efd_min, efd_max}],
     devices:    [{bus, kind, p, q, tc, i_max, v_floor}],
     regions:    [{name, boundary_bus, boundary_branch: [a, b], buses: [...]}]}

Exciter limits of ``null`` mean unbounded. An exciter entry may name only a
``profile`` and take every parameter from it.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .network import Branch, Bus, NetworkError

BUILTIN_CASES = ("ieee9", "ieee9_region")

EXCITER_PROFILES = {
    # limits at +-infinity, the linear controller
    "unlimited": dict(km=1.0, tm=0.02, ka=20.0, ta=0.05, ke=1.0, te=0.4, kf=0.05, tf=1.0,
                      efd_min=-math.inf, efd_max=math.inf),
    # same loop with the field voltage confined to [0, 3.3]
    "limited": dict(km=1.0, tm=0.02, ka=20.0, ta=0.05, ke=1.0, te=0.4, kf=0.05, tf=1.0,
                    efd_min=0.0, efd_max=3.3),
}


class CaseError(ValueError):
    pass


@dataclass
class GeneratorData:
    bus: int
    p: float
    vset: float
    p_min: float
    p_max: float
    H: float
    D: float
    xd: float
    xq: float
    xd_p: float
    xq_p: float
    Td0_p: float
    Tq0_p: float


@dataclass
class LoadData:
    bus: int
    p: float
    q: float


@dataclass
class ExciterData:
    gen_bus: int
    profile: str = "unlimited"
    km: float = 1.0
    tm: float = 0.02
    ka: float = 20.0
    ta: float = 0.05
    ke: float = 1.0
    te: float = 0.4
    kf: float = 0.05
    tf: float = 1.0
    efd_min: float = -math.inf
    efd_max: float = math.inf


@dataclass
class DeviceData:
    bus: int
    kind: str = "converter"
    p: float = 0.0
    q: float = 0.0
    tc: float = 0.1
    i_max: float = 1.5
    v_floor: float = 0.4


@dataclass
class RegionData:
    name: str
    boundary_bus: int
    boundary_branch: list[int]
    buses: list[int]


@dataclass
class Case:
    name: str
    base_mva: float
    frequency_hz: float
    buses: list[Bus]
    branches: list[Branch]
    generators: list[GeneratorData] = field(default_factory=list)
    loads: list[LoadData] = field(default_factory=list)
    exciters: list[ExciterData] = field(default_factory=list)
    devices: list[DeviceData] = field(default_factory=list)
    regions: list[RegionData] = field(default_factory=list)

    def __post_init__(self):
        ids = {b.id for b in self.buses}
        if len(ids) != len(self.buses):
            raise CaseError("duplicate bus ids")
        if sum(b.kind == "slack" for b in self.buses) != 1:
            raise CaseError("a case needs exactly one slack bus")
        for what, items, key in (("generator", self.generators, "bus"), ("load", self.loads, "bus"),
                                 ("device", self.devices, "bus")):
            for it in items:
                if getattr(it, key) not in ids:
                    raise CaseError(f"{what} at unknown bus {getattr(it, key)}")
        gen_buses = [g.bus for g in self.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise CaseError("at most one generator per bus")
        for e in self.exciters:
            if e.gen_bus not in gen_buses:
                raise CaseError(f"exciter on bus {e.gen_bus} has no generator")
        for g in self.generators:
            if not g.H > 0 or not g.Td0_p > 0 or not g.Tq0_p > 0:
                raise CaseError(f"generator {g.bus}: H and open-circuit time constants must be positive")
        for br in self.branches:
            if br.from_bus not in ids or br.to_bus not in ids:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")

    def copy(self) -> "Case":
        return copy.deepcopy(self)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise CaseError(f"unknown bus {bus_id}")

    def generator(self, bus: int) -> GeneratorData:
        for g in self.generators:
            if g.bus == bus:
                return g
        raise CaseError(f"no generator at bus {bus}")

    def exciter(self, gen_bus: int) -> ExciterData:
        for e in self.exciters:
            if e.gen_bus == gen_bus:
                return e
        raise CaseError(f"no exciter on generator {gen_bus}")

    def region(self, name: str) -> RegionData:
        for r in self.regions:
            if r.name == name:
                return r
        raise CaseError(f"no region named {name!r}")

    def set_exciter_profile(self, gen_bus: int, profile: str) -> "Case":
        exc = self.exciter(gen_bus)
        for k, v in _profile(profile).items():
            setattr(exc, k, v)
        exc.profile = profile
        return self

    def without_region(self, name: str) -> "Case":
        """The external system alone: region buses and the boundary branch removed."""
        reg = self.region(name)
        inside = set(reg.buses)
        out = self.copy()
        a, b = reg.boundary_branch
        out.buses = [x for x in out.buses if x.id not in inside]
        out.branches = [
            br for br in out.branches
            if br.from_bus not in inside and br.to_bus not in inside
        ]
        out.generators = [g for g in out.generators if g.bus not in inside]
        out.loads = [x for x in out.loads if x.bus not in inside]
        out.exciters = [e for e in out.exciters if e.gen_bus not in inside]
        out.devices = [d for d in out.devices if d.bus not in inside]
        out.regions = [r for r in out.regions if r.name != name]
        out.name = f"{self.name}-without-{name}"
        return out

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}

        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "frequency_hz": self.frequency_hz,
            "buses": [asdict(b) for b in self.buses],
            "branches": [
                {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "b": br.b, "tap": br.tap}
                for br in self.branches
            ],
            "generators": [asdict(g) for g in self.generators],
            "loads": [asdict(x) for x in self.loads],
            "exciters": [clean(asdict(e)) for e in self.exciters],
            "devices": [asdict(d) for d in self.devices],
            "regions": [asdict(r) for r in self.regions],
        }


def _profile(name: str) -> dict:
    if name not in EXCITER_PROFILES:
        raise CaseError(f"unknown exciter profile {name!r}; choose from {sorted(EXCITER_PROFILES)}")
    return dict(EXCITER_PROFILES[name])


def _build(cls, raw: dict, what: str, rename: dict | None = None):
    if not isinstance(raw, dict):
        raise CaseError(f"{what} entry must be an object")
    rename = rename or {}
    data = {rename.get(k, k): v for k, v in raw.items()}
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CaseError(f"{what}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise CaseError(f"{what}: {exc}") from None
    except NetworkError as exc:
        raise CaseError(str(exc)) from None


def _exciter(raw: dict) -> ExciterData:
    raw = dict(raw)
    params = _profile(raw.get("profile", "unlimited"))
    for key in ("efd_min", "efd_max"):
        if key in raw and raw[key] is None:
            raw[key] = -math.inf if key == "efd_min" else math.inf
    params.update(raw)
    return _build(ExciterData, params, "exciter")


def case_from_dict(data: dict) -> Case:
    if not isinstance(data, dict):
        raise CaseError("case file must hold a JSON object")
    allowed = {"name", "base_mva", "frequency_hz", "buses", "branches", "generators", "loads", "exciters",
               "devices", "regions"}
    unknown = set(data) - allowed
    if unknown:
        raise CaseError(f"unknown case field(s) {sorted(unknown)}")
    for key in ("buses", "branches"):
        if key not in data:
            raise CaseError(f"case is missing {key!r}")
    return Case(
        name=str(data.get("name", "case")),
        base_mva=float(data.get("base_mva", 100.0)),
        frequency_hz=float(data.get("frequency_hz", 60.0)),
        buses=[_build(Bus, b, "bus") for b in data["buses"]],
        branches=[_build(Branch, b, "branch", {"from": "from_bus", "to": "to_bus"}) for b in data["branches"]],
        generators=[_build(GeneratorData, g, "generator") for g in data.get("generators", [])],
        loads=[_build(LoadData, x, "load") for x in data.get("loads", [])],
        exciters=[_exciter(e) for e in data.get("exciters", [])],
        devices=[_build(DeviceData, d, "device") for d in data.get("devices", [])],
        regions=[_build(RegionData, r, "region") for r in data.get("regions", [])],
    )


def load_case(source) -> Case:
    """Load a case by built-in name or from a JSON file path."""
    if isinstance(source, Case):
        return source.copy()
    if isinstance(source, dict):
        return case_from_dict(source)
    name = str(source)
    if name in BUILTIN_CASES:
        text = resources.files("neurogrid.cases").joinpath(f"{name}.json").read_text()
    else:
        path = Path(name)
        if not path.exists():
            raise CaseError(f"no built-in case or file named {name!r}")
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"{name}: not valid JSON ({exc})") from None
    return case_from_dict(data)


def save_case(case: Case, path) -> None:
    Path(path).write_text(json.dumps(case.to_dict(), indent=2))
