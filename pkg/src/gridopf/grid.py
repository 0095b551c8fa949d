"""In-memory power grid in the per-unit system.

Element dataclasses are frozen; a :class:`Grid` is never mutated after
construction (perturbations build new grids with :func:`dataclasses.replace`).
Positional order inside each element tuple is the order used by every array
that refers to that element kind (solutions, graph features, network arrays).
"""
from __future__ import annotations

import cmath
import enum
from collections import deque
from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np


class BusType(enum.IntEnum):
    PQ = 1
    PV = 2
    REF = 3
    INACTIVE = 4


class BranchKind(enum.Enum):
    AC_LINE = "ac_line"
    TRANSFORMER = "transformer"


class DegenerateBranchError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    bus_type: BusType
    vmin: float
    vmax: float


@dataclass(frozen=True)
class Generator:
    id: int
    bus_id: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost_squared: float = 0.0
    cost_linear: float = 0.0
    cost_offset: float = 0.0
    pg: float = 0.0
    qg: float = 0.0
    vg: float = 1.0
    mbase: float = 100.0


@dataclass(frozen=True)
class Load:
    id: int
    bus_id: int
    pd: float
    qd: float


@dataclass(frozen=True)
class Shunt:
    id: int
    bus_id: int
    gs: float
    bs: float


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    br_r: float
    br_x: float
    b_fr: float = 0.0
    b_to: float = 0.0
    rate_a: float = 0.0  # 0 means unconstrained (MATPOWER convention)
    angmin: float = -2 * np.pi
    angmax: float = 2 * np.pi
    tap: float = 1.0
    shift: float = 0.0
    kind: BranchKind = BranchKind.AC_LINE
    rate_b: float = 0.0
    rate_c: float = 0.0


def branch_pi_params(branch: Branch) -> tuple[complex, complex, complex, complex]:
    """Return ``(Y, Yc_fr, Yc_to, T)`` of the branch Π-section."""
    z = complex(branch.br_r, branch.br_x)
    if z == 0:
        raise DegenerateBranchError(f"degenerate branch {branch.id}: zero series impedance")
    return 1.0 / z, 1j * branch.b_fr, 1j * branch.b_to, cmath.rect(branch.tap, branch.shift)


@dataclass(frozen=True)
class Grid:
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    branches: tuple[Branch, ...] = ()
    base_mva: float = 100.0

    def __post_init__(self):
        for name in ("buses", "generators", "loads", "shunts", "branches"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def ref_buses(self) -> list[int]:
        return [i for i, b in enumerate(self.buses) if b.bus_type == BusType.REF]

    def counts(self) -> dict[str, int]:
        lines = sum(br.kind is BranchKind.AC_LINE for br in self.branches)
        return {
            "bus": len(self.buses),
            "generator": len(self.generators),
            "load": len(self.loads),
            "shunt": len(self.shunts),
            "ac_line": lines,
            "transformer": len(self.branches) - lines,
        }

    def validate(self) -> None:
        """Raise ``ValueError`` on broken cross references or bounds."""
        idx = self.bus_index
        if len(idx) != len(self.buses):
            raise ValueError("duplicate bus ids")
        if not self.ref_buses:
            raise ValueError("grid has no REF bus")
        for b in self.buses:
            if not 0 < b.vmin <= b.vmax:
                raise ValueError(f"bus {b.id}: invalid voltage bounds")
        for kind, items in (("generator", self.generators), ("load", self.loads), ("shunt", self.shunts)):
            for it in items:
                if it.bus_id not in idx:
                    raise ValueError(f"{kind} {it.id} refers to unknown bus {it.bus_id}")
        for g in self.generators:
            if g.pmin > g.pmax or g.qmin > g.qmax:
                raise ValueError(f"generator {g.id}: inverted bounds")
        for br in self.branches:
            if br.from_bus not in idx or br.to_bus not in idx:
                raise ValueError(f"branch {br.id} refers to unknown bus")
            if br.br_r ** 2 + br.br_x ** 2 <= 0:
                raise DegenerateBranchError(f"degenerate branch {br.id}: zero series impedance")
            if br.tap <= 0 or br.angmin > br.angmax or br.rate_a < 0:
                raise ValueError(f"branch {br.id}: invalid parameters")

    def active(self) -> Grid:
        """Copy without INACTIVE buses and the elements attached to them."""
        keep = {b.id for b in self.buses if b.bus_type != BusType.INACTIVE}
        if len(keep) == len(self.buses):
            return self
        return Grid(
            buses=[b for b in self.buses if b.id in keep],
            generators=[g for g in self.generators if g.bus_id in keep],
            loads=[ld for ld in self.loads if ld.bus_id in keep],
            shunts=[s for s in self.shunts if s.bus_id in keep],
            branches=[br for br in self.branches if br.from_bus in keep and br.to_bus in keep],
            base_mva=self.base_mva,
        )

    def without(self, kind: str, element_id: int) -> Grid:
        """Copy with one generator or branch removed (by id)."""
        if kind == "generator":
            return replace(self, generators=[g for g in self.generators if g.id != element_id])
        if kind == "branch":
            return replace(self, branches=[br for br in self.branches if br.id != element_id])
        raise ValueError(f"cannot drop element kind {kind!r}")


def is_connected(grid: Grid) -> bool:
    """True iff every active bus is reachable from a REF bus over branches."""
    active = [b.id for b in grid.buses if b.bus_type != BusType.INACTIVE]
    if not active:
        return True
    adj: dict[int, list[int]] = {b: [] for b in active}
    for br in grid.branches:
        if br.from_bus in adj and br.to_bus in adj:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    refs = [b.id for b in grid.buses if b.bus_type == BusType.REF]
    start = refs[0] if refs else active[0]
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(active)


SOLUTION_FIELDS = ("va", "vm", "pg", "qg", "pf", "qf", "pt", "qt")


@dataclass
class OpfSolution:
    """Dispatch decision: bus voltages, generator powers, branch flows (p.u., rad).

    Reactive arrays may be NaN for partial (DC) solutions.
    """

    va: np.ndarray
    vm: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    pf: np.ndarray
    qf: np.ndarray
    pt: np.ndarray
    qt: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))

    def check_shape(self, grid: Grid) -> None:
        expect = {"va": grid.n_bus, "vm": grid.n_bus, "pg": len(grid.generators),
                  "qg": len(grid.generators)}
        expect.update({k: len(grid.branches) for k in ("pf", "qf", "pt", "qt")})
        for name, n in expect.items():
            if getattr(self, name).shape != (n,):
                raise ValueError(f"solution field {name} has shape {getattr(self, name).shape}, expected ({n},)")

    def copy(self) -> OpfSolution:
        return OpfSolution(**{k: getattr(self, k).copy() for k in SOLUTION_FIELDS})

    def equals(self, other: OpfSolution) -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
                   for k in SOLUTION_FIELDS)


# ---------------------------------------------------------------------------
# Index-based arrays shared by the physics code (constraints, power flow, model)
# ---------------------------------------------------------------------------

@dataclass
class NetworkArrays:
    """Flat, index-based view of one grid (or a disjoint batch of grids).

    ``*_graph`` arrays map each entity to the grid it came from; they are all
    zero for a single grid.
    """

    n_bus: int
    ref_mask: np.ndarray            # (nb,) bool
    vmin: np.ndarray
    vmax: np.ndarray
    gen_bus: np.ndarray             # (ng,) int
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    pd_bus: np.ndarray              # (nb,) aggregated demand
    qd_bus: np.ndarray
    gs_bus: np.ndarray              # (nb,) aggregated shunt admittance
    bs_bus: np.ndarray
    f: np.ndarray                   # (nl,) from-bus index
    t: np.ndarray
    g: np.ndarray                   # series conductance
    b: np.ndarray                   # series susceptance
    b_fr: np.ndarray
    b_to: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    rate: np.ndarray                # inf where unconstrained
    angmin: np.ndarray
    angmax: np.ndarray
    is_transformer: np.ndarray
    bus_graph: np.ndarray = field(default=None)
    gen_graph: np.ndarray = field(default=None)
    branch_graph: np.ndarray = field(default=None)
    n_graph: int = 1

    def __post_init__(self):
        if self.bus_graph is None:
            self.bus_graph = np.zeros(self.n_bus, dtype=np.int64)
            self.gen_graph = np.zeros(len(self.gen_bus), dtype=np.int64)
            self.branch_graph = np.zeros(len(self.f), dtype=np.int64)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    @property
    def n_branch(self) -> int:
        return len(self.f)

    @staticmethod
    def concat(parts: list[NetworkArrays]) -> NetworkArrays:
        bus_off = np.cumsum([0] + [p.n_bus for p in parts[:-1]])
        kw = {}
        for fl in fields(NetworkArrays):
            name = fl.name
            if name in ("n_bus", "n_graph"):
                continue
            arrs = [getattr(p, name) for p in parts]
            if name in ("gen_bus", "f", "t"):
                arrs = [a + o for a, o in zip(arrs, bus_off)]
            elif name in ("bus_graph", "gen_graph", "branch_graph"):
                g_off = np.cumsum([0] + [p.n_graph for p in parts[:-1]])
                arrs = [a + o for a, o in zip(arrs, g_off)]
            kw[name] = np.concatenate(arrs)
        return NetworkArrays(n_bus=sum(p.n_bus for p in parts),
                             n_graph=sum(p.n_graph for p in parts), **kw)


def compile_network(grid: Grid) -> NetworkArrays:
    if any(b.bus_type == BusType.INACTIVE for b in grid.buses):
        raise ValueError("grid contains INACTIVE buses; call grid.active() first")
    idx = grid.bus_index
    nb = grid.n_bus
    pd = np.zeros(nb)
    qd = np.zeros(nb)
    for ld in grid.loads:
        pd[idx[ld.bus_id]] += ld.pd
        qd[idx[ld.bus_id]] += ld.qd
    gs = np.zeros(nb)
    bs = np.zeros(nb)
    for s in grid.shunts:
        gs[idx[s.bus_id]] += s.gs
        bs[idx[s.bus_id]] += s.bs
    gens = grid.generators
    brs = grid.branches
    r = np.array([br.br_r for br in brs], dtype=np.float64)
    x = np.array([br.br_x for br in brs], dtype=np.float64)
    if np.any(r * r + x * x == 0):
        raise DegenerateBranchError("degenerate branch: zero series impedance")
    z2 = r * r + x * x
    rate = np.array([br.rate_a for br in brs], dtype=np.float64)
    return NetworkArrays(
        n_bus=nb,
        ref_mask=np.array([b.bus_type == BusType.REF for b in grid.buses], dtype=bool),
        vmin=np.array([b.vmin for b in grid.buses], dtype=np.float64),
        vmax=np.array([b.vmax for b in grid.buses], dtype=np.float64),
        gen_bus=np.array([idx[g.bus_id] for g in gens], dtype=np.int64),
        pmin=np.array([g.pmin for g in gens], dtype=np.float64),
        pmax=np.array([g.pmax for g in gens], dtype=np.float64),
        qmin=np.array([g.qmin for g in gens], dtype=np.float64),
        qmax=np.array([g.qmax for g in gens], dtype=np.float64),
        c2=np.array([g.cost_squared for g in gens], dtype=np.float64),
        c1=np.array([g.cost_linear for g in gens], dtype=np.float64),
        pd_bus=pd, qd_bus=qd, gs_bus=gs, bs_bus=bs,
        f=np.array([idx[br.from_bus] for br in brs], dtype=np.int64),
        t=np.array([idx[br.to_bus] for br in brs], dtype=np.int64),
        g=r / z2, b=-x / z2,
        b_fr=np.array([br.b_fr for br in brs], dtype=np.float64),
        b_to=np.array([br.b_to for br in brs], dtype=np.float64),
        tap=np.array([br.tap for br in brs], dtype=np.float64),
        shift=np.array([br.shift for br in brs], dtype=np.float64),
        rate=np.where(rate > 0, rate, np.inf),
        angmin=np.array([br.angmin for br in brs], dtype=np.float64),
        angmax=np.array([br.angmax for br in brs], dtype=np.float64),
        is_transformer=np.array([br.kind is BranchKind.TRANSFORMER for br in brs], dtype=bool),
    )
