import dataclasses

import numpy as np
import pytest

from gridopf.acpf import PfOptions, build_ybus, restore, solve_pf
from gridopf.baselines import solve_dcopf
from gridopf.constraints import violation_degrees
from gridopf.grid import Shunt
from helpers import two_bus


def test_ybus_single_branch():
    Y = build_ybus(two_bus()).toarray()
    np.testing.assert_allclose(Y, [[-10j, 10j], [10j, -10j]], atol=1e-14)


def test_ybus_shunt():
    g = two_bus()
    g = dataclasses.replace(g, shunts=(Shunt(1, 1, 0.0, 0.05),))
    Y = build_ybus(g).toarray()
    assert Y[0, 0] == pytest.approx(-10j + 0.05j)
    assert Y[1, 1] == pytest.approx(-10j)


def test_two_bus_closed_form():
    # lossless: p = sin(-va2) vm2 / x and q = 0 give vm2 = cos(va2), sin(2 va2) = -0.1
    res = solve_pf(two_bus(pd=0.5))
    va2 = -np.arcsin(0.1) / 2
    assert res.converged
    assert res.solution.vm[1] == pytest.approx(np.cos(va2), abs=1e-6)
    assert res.solution.va[1] == pytest.approx(va2, abs=1e-6)
    assert res.solution.vm[1] == pytest.approx(0.998746, abs=1e-6)


def test_zero_load_flat_start():
    res = solve_pf(two_bus(pd=0.0))
    assert res.converged and res.iterations <= 2
    np.testing.assert_allclose(res.solution.vm, 1.0, atol=1e-12)
    np.testing.assert_allclose(res.solution.va, 0.0, atol=1e-12)
    assert res.solution.pg[0] == pytest.approx(0.0, abs=1e-12)


def _pv_gen(grid):
    ref = {b.id for b in grid.buses if b.bus_type.name == "REF"}
    return next(k for k, g in enumerate(grid.generators) if g.bus_id not in ref)


def test_q_limit_enforced(case14):
    wide = solve_pf(case14, opts=PfOptions(enforce_q_lims=False))
    k = _pv_gen(case14)
    q_nat = wide.solution.qg[k]
    gens = list(case14.generators)
    gens[k] = dataclasses.replace(gens[k], qmin=q_nat - 1.0, qmax=q_nat - 0.05)
    g = dataclasses.replace(case14, generators=gens)
    res = solve_pf(g)
    assert res.converged
    assert gens[k].bus_id in res.limited_buses
    assert res.solution.qg[k] == gens[k].qmax


def test_restore_is_fixed_point(case14):
    first = solve_pf(case14)
    again = restore(case14, first.solution)
    assert again.converged
    for f in ("va", "vm", "pg", "qg", "pf", "qf", "pt", "qt"):
        np.testing.assert_allclose(getattr(again.solution, f), getattr(first.solution, f), atol=1e-6)
    assert again.violations is not None


def test_restore_dc_moves_slack(case14):
    dc = solve_dcopf(case14)
    res = restore(case14, dc.to_opf_solution())
    assert res.converged
    ref_gen = [k for k, g in enumerate(case14.generators) if g.bus_id == 1]
    assert res.solution.pg[ref_gen[0]] > dc.pg[ref_gen[0]] + 1e-4
    rep = violation_degrees(case14, res.solution)
    assert rep["p_balance"].max() <= 1e-8


def test_nonconvergence_is_reported():
    res = solve_pf(two_bus(pd=50.0), opts=PfOptions(max_iter=8))
    assert not res.converged
    assert res.message
