import numpy as np
import pytest

from gridopf.acpf import build_ybus
from gridopf.constraints import (FAMILIES, ViolationReport, balance_mismatch, complete_solution,
                                 derive_branch_flows, feasibility_at_threshold, objective_cost,
                                 sigmoid_bound, violation_degrees)
from gridopf.grid import Bus, BusType, Generator, Grid, Load, OpfSolution, compile_network
from gridopf.synthetic import random_grid
from helpers import two_bus


def _gen_grid(costs, base=100.0):
    buses = [Bus(1, 1.0, BusType.REF, 0.9, 1.1)]
    gens = [Generator(k, 1, 0.0, 5.0, -1.0, 1.0, cost_squared=c2, cost_linear=c1, cost_offset=99.0)
            for k, (c2, c1) in enumerate(costs)]
    return Grid(buses, gens, base_mva=base)


def _sol(grid, pg):
    nb, nl = grid.n_bus, len(grid.branches)
    return OpfSolution(np.zeros(nb), np.ones(nb), pg, np.zeros(len(pg)), *(np.zeros(nl),) * 4)


def test_cost_linear():
    # 40 $/MWh at baseMVA 100 is 4000 $/h per p.u.
    g = _gen_grid([(0.0, 40.0 * 100)])
    assert objective_cost(g, _sol(g, [0.5])) == pytest.approx(2000.0)
    assert objective_cost(g, _sol(g, [0.0])) == 0.0


def test_cost_quadratic_matches_mixed_units():
    base = 100.0
    c2_mw = 0.01  # $/MW^2 h
    g = _gen_grid([(c2_mw * base ** 2, 0.0)] * 2)
    pg_mw = np.array([1.0, 1.0]) * base
    expected = float(np.sum(c2_mw * pg_mw ** 2))
    assert objective_cost(g, _sol(g, [1.0, 1.0])) == pytest.approx(expected)
    assert expected == pytest.approx(200.0)


def test_flows_equal_voltages_are_zero():
    g = two_bus()
    flows = derive_branch_flows(g, np.zeros(2), np.ones(2))
    for x in flows:
        assert np.allclose(x, 0.0, atol=1e-15)


def test_flows_against_complex_oracle():
    g = two_bus()
    pf, qf, pt, qt = derive_branch_flows(g, np.array([0.0, -0.1]), np.ones(2))
    s = 10j * (1 - np.exp(0.1j))
    assert pf[0] == pytest.approx(s.real, abs=1e-12)
    assert qf[0] == pytest.approx(s.imag, abs=1e-12)
    assert pf[0] == pytest.approx(0.99833, abs=1e-5)
    assert qf[0] == pytest.approx(0.04996, abs=1e-5)


def test_lossless_flows_antisymmetric(rng):
    g = two_bus(r=0.0)
    for _ in range(50):
        pf, qf, pt, qt = derive_branch_flows(g, rng.uniform(-0.5, 0.5, 2), rng.uniform(0.9, 1.1, 2))
        assert abs(pf[0] + pt[0]) <= 1e-12


def _matpower_branch_admittances(br):
    ys = 1 / (br.br_r + 1j * br.br_x)
    tap = br.tap * np.exp(1j * br.shift)
    ytt = ys + 1j * br.b_to
    yff = (ys + 1j * br.b_fr) / (tap * np.conj(tap))
    return yff, -ys / np.conj(tap), -ys / tap, ytt


def test_flows_match_branch_admittance_oracle(rng):
    for _ in range(10):
        g = random_grid(rng, n_bus=14, transformer_fraction=0.4)
        va = rng.uniform(-0.3, 0.3, g.n_bus)
        vm = rng.uniform(0.9, 1.1, g.n_bus)
        v = vm * np.exp(1j * va)
        pf, qf, pt, qt = derive_branch_flows(g, va, vm)
        idx = g.bus_index
        for k, br in enumerate(g.branches):
            yff, yft, ytf, ytt = _matpower_branch_admittances(br)
            vi, vj = v[idx[br.from_bus]], v[idx[br.to_bus]]
            sf = vi * np.conj(yff * vi + yft * vj)
            st = vj * np.conj(ytf * vi + ytt * vj)
            assert abs(complex(pf[k], qf[k]) - sf) <= 1e-12
            assert abs(complex(pt[k], qt[k]) - st) <= 1e-12


def test_flow_and_ybus_balance_agree(rng):
    for _ in range(10):
        g = random_grid(rng, n_bus=14, transformer_fraction=0.4, shunt_fraction=0.5)
        net = compile_network(g)
        va = rng.uniform(-0.3, 0.3, g.n_bus)
        vm = rng.uniform(0.9, 1.1, g.n_bus)
        pg = rng.uniform(0, 1, net.n_gen)
        qg = rng.uniform(-1, 1, net.n_gen)
        pf, qf, pt, qt = derive_branch_flows(g, va, vm)
        p_mis, q_mis = balance_mismatch(net, vm, pg, qg, pf, qf, pt, qt)
        v = vm * np.exp(1j * va)
        sbus = v * np.conj(build_ybus(g) @ v)
        sgen = np.bincount(net.gen_bus, pg, g.n_bus) + 1j * np.bincount(net.gen_bus, qg, g.n_bus)
        mis = sgen - (net.pd_bus + 1j * net.qd_bus) - sbus
        np.testing.assert_allclose(p_mis, mis.real, atol=1e-10)
        np.testing.assert_allclose(q_mis, mis.imag, atol=1e-10)


def test_isolated_load_imbalance():
    g = Grid([Bus(1, 1.0, BusType.REF, 0.9, 1.1)], loads=[Load(1, 1, 1.0, 0.0)])
    rep = violation_degrees(g, _sol(g, np.zeros(0)))
    assert rep["p_balance"][0] == pytest.approx(1.0)
    assert rep["q_balance"][0] == 0.0


def test_pg_bound_degree():
    g = Grid([Bus(1, 1.0, BusType.REF, 0.9, 1.1)], generators=[Generator(1, 1, 0.0, 1.0, -1.0, 1.0)])
    rep = violation_degrees(g, _sol(g, np.array([1.2])))
    assert rep["pg_bounds"][0] == pytest.approx(0.2)


def test_derived_flows_have_zero_ohm_degrees(case14, rng):
    va = rng.uniform(-0.3, 0.3, 14)
    vm = rng.uniform(0.9, 1.1, 14)
    sol = complete_solution(case14, va, vm, np.zeros(5), np.zeros(5))
    rep = violation_degrees(case14, sol)
    for fam in ("ohm_from_p", "ohm_from_q", "ohm_to_p", "ohm_to_q"):
        assert rep[fam].max() <= 1e-12
    assert set(rep.degrees) == set(FAMILIES)


def test_solution_shape_checked(case14):
    g = two_bus()
    with pytest.raises(ValueError):
        violation_degrees(case14, _sol(g, np.zeros(1)))


def test_feasibility_at_threshold():
    rep = ViolationReport({"a": np.array([0.0, 0.005, 0.02]), "b": np.zeros(3), "c": np.zeros(0)})
    out = feasibility_at_threshold(rep, 0.01)
    assert out["a"] == pytest.approx(200 / 3)
    assert out["b"] == 100.0
    assert out["c"] is None
    for tau in (1e-2, 1e-4, 1e-6, 1e-8):
        assert feasibility_at_threshold(rep, tau)["b"] == 100.0
    with pytest.raises(ValueError):
        feasibility_at_threshold(rep, 0.0)


def test_sigmoid_bound_degenerate_box():
    assert sigmoid_bound(np.array([5.0]), np.array([0.3]), np.array([0.3]))[0] == 0.3
    assert sigmoid_bound(np.array([0.0]), np.array([0.9]), np.array([1.1]))[0] == pytest.approx(1.0)
