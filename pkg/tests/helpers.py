"""Small hand-built grids shared by the tests."""
import numpy as np

from gridopf.grid import Branch, Bus, BusType, Generator, Grid, Load


def two_bus(x=0.1, r=0.0, pd=0.5, qd=0.0, c1=1000.0, c2=0.0, pmax=2.0, qlim=2.0, rate=0.0):
    """REF bus 1 with one generator feeding a PQ load at bus 2 over one line."""
    buses = [Bus(1, 100.0, BusType.REF, 0.9, 1.1), Bus(2, 100.0, BusType.PQ, 0.9, 1.1)]
    gens = [Generator(1, 1, 0.0, pmax, -qlim, qlim, cost_squared=c2, cost_linear=c1, vg=1.0)]
    loads = [Load(1, 2, pd, qd)]
    rate_a = rate if rate > 0 else np.inf
    br = [Branch(1, 1, 2, r, x, 0.0, 0.0, rate_a=rate_a, angmin=-np.pi / 3, angmax=np.pi / 3)]
    return Grid(buses, gens, loads, (), br, base_mva=100.0)


def chain(n=3, gen_buses=(1,)):
    buses = [Bus(i, 100.0, BusType.REF if i == 1 else (BusType.PV if i in gen_buses else BusType.PQ),
                 0.9, 1.1) for i in range(1, n + 1)]
    gens = [Generator(k, b, 0.0, 2.0, -1.0, 1.0, cost_linear=1000.0) for k, b in enumerate(gen_buses, 1)]
    loads = [Load(1, n, 0.3, 0.1)]
    brs = [Branch(i, i, i + 1, 0.01, 0.1, 0.01, 0.01, rate_a=np.inf, angmin=-np.pi / 3,
                  angmax=np.pi / 3) for i in range(1, n)]
    return Grid(buses, gens, loads, (), brs)


def ring3():
    g = chain(3)
    extra = Branch(3, 1, 3, 0.01, 0.1, 0.0, 0.0, rate_a=np.inf, angmin=-np.pi / 3, angmax=np.pi / 3)
    return Grid(g.buses, g.generators, g.loads, g.shunts, g.branches + (extra,))


def probe_local_optimality(grid, solution, step=1e-3, slack=1e-5):
    """Largest cost decrease found by ``±step`` probes on each non-REF pg.

    Each probe is restored by power flow (the REF generator absorbs the
    change).  Probes whose restored point leaves the tolerance-feasible set,
    that is some family's max degree exceeds the base point's by more than
    ``slack``, are not counted.  Returns ``(best_gain, n_feasible_probes)``.
    """
    from gridopf.acpf import restore
    from gridopf.constraints import objective_cost

    base = restore(grid, solution)
    if not base.converged:
        raise RuntimeError("base point does not restore")
    base_cost = objective_cost(grid, base.solution)
    base_max = base.violations.max()
    ref_ids = {b.id for b in grid.buses if b.bus_type == BusType.REF}
    best, n_ok = -np.inf, 0
    for k, gen in enumerate(grid.generators):
        if gen.bus_id in ref_ids:
            continue
        for s in (step, -step):
            trial = solution.copy()
            trial.pg[k] += s
            res = restore(grid, trial)
            if not res.converged:
                continue
            worst = res.violations.max()
            if any(v is not None and v > (base_max[f] or 0.0) + slack for f, v in worst.items()):
                continue
            n_ok += 1
            best = max(best, base_cost - objective_cost(grid, res.solution))
    return best, n_ok


def synthetic_case(n_bus=500, n_gen=171, n_load=281, n_shunt=31, n_line=536, n_xfmr=192):
    """MATPOWER text with prescribed element counts (a ring plus chords)."""
    rows = []
    for i in range(1, n_bus + 1):
        btype = 3 if i == 1 else 1
        pd, qd = (10.0, 1.0) if i <= n_load else (0.0, 0.0)
        bs = 5.0 if i <= n_shunt else 0.0
        rows.append(f"{i} {btype} {pd} {qd} 0 {bs} 1 1 0 138 1 1.06 0.94;")
    gens = [f"{(k % n_bus) + 1} 10 0 50 -50 1 100 1 100 0;" for k in range(n_gen)]
    costs = ["2 0 0 3 0.01 20 0;"] * n_gen
    branches = []
    for k in range(n_line + n_xfmr):
        a = k % n_bus + 1
        b = (k + 1 + k // n_bus) % n_bus + 1
        ratio = 1.02 if k >= n_line else 0
        branches.append(f"{a} {b} 0.01 0.1 0.01 100 100 100 {ratio} 0 1 -360 360;")
    return "\n".join([
        "mpc.baseMVA = 100;",
        "mpc.bus = [", *rows, "];",
        "mpc.gen = [", *gens, "];",
        "mpc.branch = [", *branches, "];",
        "mpc.gencost = [", *costs, "];",
    ])
