import math

import numpy as np
import pytest

from gridopf.baselines import solve_dcopf
from gridopf.constraints import ViolationReport, feasibility_at_threshold, violation_degrees
from gridopf.datagen import DatagenConfig, generate_examples
from gridopf.gnn import ModelConfig, TrainConfig, train
from gridopf.graph import StandardizationStats
from gridopf.harness import (EvalReport, evaluate, improving_pairs, mse, optimality_ratio, post_pf_degrees,
                             report_tables, sweep, trmae)
from gridopf.harness.report import PRE_PF_FAMILIES, SUPERVISED_ROWS, THRESHOLDS, row_key


@pytest.fixture(scope="module")
def examples():
    ex, _ = generate_examples(DatagenConfig("case14", 6, seed=4), "dc")
    return ex


def test_trmae_fixtures():
    assert trmae([2.2], [2.0]) == pytest.approx(0.10)
    assert trmae([2.2, 99.0], [2.0, 0.0005]) == pytest.approx(0.10)
    assert trmae([1.0, -3.0, 0.5], [1.0, -3.0, 0.5]) == 0.0
    assert trmae([1.0], [0.0]) is None
    with pytest.raises(ValueError):
        trmae([1.0, 2.0], [1.0])


def test_mse_fixtures():
    assert mse([1.0, 1.0], [0.0, 2.0]) == 1.0
    assert mse([3.0, 4.0, 5.0], [3.0, 4.0, 5.0]) == 0.0
    assert mse([1.0, 2.0, 4.0], [0.0, 0.0, 0.0]) == pytest.approx(7.0)
    assert mse([], []) is None


def test_optimality_fixtures():
    assert optimality_ratio(100.0, 100.0) == 100.0
    assert optimality_ratio(101.0, 100.0) == pytest.approx(101.0)
    with pytest.raises(ValueError):
        optimality_ratio(1.0, 0.0)


def test_threshold_table_fixture():
    rep = ViolationReport({"x": np.array([1e-3, 1e-5, 1e-9])})
    got = [feasibility_at_threshold(rep, t)["x"] for t in THRESHOLDS]
    assert got == pytest.approx([100.0, 200 / 3, 100 / 3, 100 / 3])


def test_reference_against_itself(examples):
    refs = [e.solution for e in examples]
    rep = evaluate(refs, examples, with_pf=False)
    for k, v in rep.trmae_pre.items():
        assert v in (0.0, None), k
    assert all(v == 0.0 for v in rep.mse_pre.values() if v is not None)
    assert rep.optimality_pre == pytest.approx(100.0)
    pooled = ViolationReport.pooled([violation_degrees(e.grid, e.solution).subset(PRE_PF_FAMILIES)
                                     for e in examples])
    for fam in PRE_PF_FAMILIES:
        assert rep.feasibility_pre[fam]["max"] == pooled.max()[fam]
        assert rep.feasibility_pre[fam]["mean"] == pooled.mean()[fam]


def test_dc_baseline_reactive_rows_absent(examples):
    rep = evaluate(lambda g: solve_dcopf(g).to_opf_solution(), examples)
    for group, fld in SUPERVISED_ROWS:
        v = rep.trmae_pre[row_key(group, fld)]
        assert (v is None) == (fld in ("qg", "qf", "qt")), (group, fld)
    assert rep.feasibility_pre["q_balance"]["mean"] is None
    assert rep.pf_convergence == 100.0
    assert rep.feasibility_post["pg_bounds_slack"]["mean"] is not None
    assert rep.timing["pre_pf"]["mean"] > 0
    text = report_tables({"dc": rep})
    line = next(ln for ln in text.splitlines() if ln.startswith("Gen qg"))
    assert line.split()[-1] == "-"
    assert "Trasf. pf" in text


def test_slack_rows_only_ref_generators(examples):
    ex = examples[0]
    rep = post_pf_degrees(ex.grid, ex.solution)
    n_ref_gen = sum(g.bus_id == 1 for g in ex.grid.generators)
    assert rep["qg_bounds_slack"].size == n_ref_gen == rep["pg_bounds_slack"].size
    n_pv = len({g.bus_id for g in ex.grid.generators} - {1})
    assert rep["vm_bounds_pv"].size == n_pv
    assert rep["vm_bounds_pq"].size == ex.grid.n_bus - n_pv - 1


def test_report_round_trip(examples):
    rep = evaluate([e.solution for e in examples], examples)
    back = EvalReport.from_json(rep.to_json())
    assert back.to_dict() == rep.to_dict()
    assert set(back.thresholds_pre) == {"0.01", "0.0001", "1e-06", "1e-08"}


def test_evaluate_rejects_unlabeled(examples):
    from gridopf.case_io import Example
    with pytest.raises(ValueError):
        evaluate([examples[0].solution], [Example(examples[0].grid)])


def _dataset(examples):
    train_ex = examples[:5]
    stats = StandardizationStats.fit([e.grid for e in train_ex], [e.solution for e in train_ex])
    return {"train": train_ex, "val": examples[5:], "stats": stats}


def test_single_size_sweep_is_plain_training(examples):
    ds = _dataset(examples)
    tc = TrainConfig(total_steps=3, batch_size=2, warmup_steps=1, peak_lr=1e-3, transition_steps=5,
                     eval_every=3)
    mc = ModelConfig(8, 2)
    res = sweep([2], ds, tc, mc, seeds=(0,))
    plain = train(tc, mc, ds)
    assert res[2]["final_loss_con_mean"] == plain.validation[-1]["loss_con"]
    assert res[2]["final_loss_con_spread"] == 0.0


def test_sweep_two_seeds_spread(examples):
    tc = TrainConfig(total_steps=2, batch_size=2, warmup_steps=1, peak_lr=1e-3, transition_steps=5,
                     eval_every=2)
    res = sweep([1], _dataset(examples), tc, ModelConfig(8, 1), seeds=(0, 1))
    finals = [r["final"]["loss_con"] for r in res[1]["runs"]]
    assert res[1]["final_loss_con_mean"] == pytest.approx(np.mean(finals))
    assert res[1]["final_loss_con_spread"] == pytest.approx(abs(finals[0] - finals[1]))


def test_improving_pairs():
    cells = {2: {"k": 3.0}, 4: {"k": 2.0}, 8: {"k": 2.5}}
    assert improving_pairs(cells, "k") == 1
    cells[8]["k"] = 2.0
    assert improving_pairs(cells, "k") == 2
    cells[4]["k"] = None
    assert improving_pairs(cells, "k") == 0
    assert not math.isnan(improving_pairs({}, "k"))
