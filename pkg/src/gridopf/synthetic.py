"""Small random grids for tests and quick experiments."""
from __future__ import annotations

import numpy as np

from .grid import Branch, BranchKind, Bus, BusType, Generator, Grid, Load, Shunt


def random_grid(rng: np.random.Generator, n_bus: int = 10, extra_branches: int | None = None,
                gen_fraction: float = 0.4, transformer_fraction: float = 0.2,
                shunt_fraction: float = 0.2, load_scale: float = 0.3) -> Grid:
    """Connected grid with a random spanning tree plus extra branches.

    Bus 1 is the REF bus and always carries a generator.  Total generation
    capacity is comfortably above total demand so OPF problems are feasible.
    """
    if n_bus < 1:
        raise ValueError("need at least one bus")
    buses = []
    gen_buses = {1} | {i for i in range(2, n_bus + 1) if rng.random() < gen_fraction}
    for i in range(1, n_bus + 1):
        if i == 1:
            kind = BusType.REF
        else:
            kind = BusType.PV if i in gen_buses else BusType.PQ
        buses.append(Bus(i, float(rng.choice([1.0, 138.0, 230.0])), kind, 0.94, 1.06))

    pairs = []
    for i in range(2, n_bus + 1):
        pairs.append((int(rng.integers(1, i)), i))
    if extra_branches is None:
        extra_branches = n_bus // 2
    seen = set(pairs)
    for _ in range(extra_branches):
        if n_bus < 3:
            break
        a, b = sorted(int(v) for v in rng.choice(np.arange(1, n_bus + 1), 2, replace=False))
        if (a, b) not in seen:
            seen.add((a, b))
            pairs.append((a, b))

    branches = []
    for k, (a, b) in enumerate(pairs, start=1):
        r = float(rng.uniform(0.005, 0.03))
        x = float(rng.uniform(0.05, 0.15))
        if rng.random() < transformer_fraction:
            branches.append(Branch(k, a, b, r, x, 0.0, 0.0, rate_a=float(rng.uniform(1.5, 3.0)),
                                   angmin=-np.pi / 6, angmax=np.pi / 6,
                                   tap=float(rng.uniform(0.95, 1.05)),
                                   shift=float(rng.choice([0.0, rng.uniform(-0.05, 0.05)])),
                                   kind=BranchKind.TRANSFORMER))
        else:
            bc = float(rng.uniform(0.0, 0.05))
            branches.append(Branch(k, a, b, r, x, bc / 2, bc / 2, rate_a=float(rng.uniform(1.5, 3.0)),
                                   angmin=-np.pi / 6, angmax=np.pi / 6))

    loads = []
    for i in range(2, n_bus + 1):
        if rng.random() < 0.7 or i not in gen_buses:
            pd = float(rng.uniform(0.2, 1.0) * load_scale)
            loads.append(Load(len(loads) + 1, i, pd, float(pd * rng.uniform(0.1, 0.4))))
    if not loads:
        loads.append(Load(1, 1, 0.1, 0.02))
    total = sum(ld.pd for ld in loads)

    gens = []
    cap = 2.0 * total / len(gen_buses) + 0.2
    for i in sorted(gen_buses):
        gens.append(Generator(len(gens) + 1, i, pmin=0.0, pmax=float(cap * rng.uniform(1.0, 1.5)),
                              qmin=-float(cap), qmax=float(cap),
                              cost_squared=float(rng.uniform(0.0, 20.0)),
                              cost_linear=float(rng.uniform(500.0, 4000.0)),
                              cost_offset=float(rng.uniform(0.0, 100.0)),
                              pg=float(total / len(gen_buses)), vg=1.0))
    shunts = []
    for i in range(1, n_bus + 1):
        if rng.random() < shunt_fraction:
            shunts.append(Shunt(len(shunts) + 1, i, float(rng.uniform(0.0, 0.02)),
                                float(rng.uniform(-0.05, 0.2))))
    return Grid(buses, gens, loads, shunts, branches, base_mva=100.0)
