import dataclasses
import json

import numpy as np
import pytest

from gridopf import autodiff as ad
from gridopf.acpf import solve_pf
from gridopf.case_io import Example, load_checkpoint
from gridopf.constraints import complete_solution, violable_degrees, violation_degrees
from gridopf.datagen import DatagenConfig, generate_examples
from gridopf.gnn import (ModelConfig, TrainConfig, TrainingError, batch_positions, evaluate_loss,
                         expected_param_count, forward, gradient, init_params, loss, lr_at, make_batch,
                         param_count, predict_batch, prepare, train)
from gridopf.gnn.model import bound_outputs
from gridopf.graph import StandardizationStats, to_typed_graph
from gridopf.grid import Grid, compile_network
from gridopf.synthetic import random_grid
from helpers import two_bus


def _jitter(params, rng, scale):
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}


@pytest.fixture(scope="module")
def small_dataset():
    examples, _ = generate_examples(DatagenConfig("case14", 24, seed=0), "dc")
    stats = StandardizationStats.fit([e.grid for e in examples[:20]], [e.solution for e in examples[:20]])
    return {"train": examples[:20], "val": examples[20:], "test": [], "stats": stats}


def test_outputs_respect_bounds(case14, rng):
    stats = StandardizationStats.fit([case14])
    graph = to_typed_graph(case14, stats)
    net = compile_network(case14)
    for seed in range(5):
        p = _jitter(init_params(ModelConfig(16, 2), seed), rng, 0.02)
        sol = forward(p, graph, case14)
        assert np.all(sol.va[net.ref_mask] == 0.0)
        assert np.all((sol.vm > net.vmin) & (sol.vm < net.vmax))
        assert np.all((sol.pg > net.pmin) & (sol.pg < net.pmax))
        assert np.all((sol.qg > net.qmin) & (sol.qg < net.qmax))
        rep = violation_degrees(case14, sol)
        for fam in ("ohm_from_p", "ohm_from_q", "ohm_to_p", "ohm_to_q"):
            assert rep[fam].max() <= 1e-12


def test_saturated_outputs_stay_on_bounds(case14, rng):
    # huge weights push the sigmoid to 0 or 1, which rounds onto the bound
    graph = to_typed_graph(case14, StandardizationStats.identity())
    net = compile_network(case14)
    p = _jitter(init_params(ModelConfig(8, 1), 0), rng, 10.0)
    sol = forward(p, graph, case14)
    rep = violation_degrees(case14, sol)
    for fam in ("pg_bounds", "qg_bounds", "vm_bounds", "ref_angle"):
        assert rep[fam].max() == 0.0
    assert np.all(sol.vm >= net.vmin) and np.all(sol.vm <= net.vmax)


def test_zero_raw_gives_midpoint():
    net = compile_network(two_bus())
    raw = {"va": np.zeros(2), "vm": np.zeros(2), "pg": np.zeros(1), "qg": np.zeros(1)}
    out = bound_outputs(raw, net)
    np.testing.assert_allclose(out["vm"], 1.0)
    assert out["pg"][0] == pytest.approx(1.0)
    assert out["va"][0] == 0.0


def test_loss_zero_when_exact_and_feasible():
    g = two_bus(pd=0.0)
    sol = complete_solution(g, np.zeros(2), np.ones(2), np.zeros(1), np.zeros(1))
    assert loss(sol, sol, g) == (0.0, 0.0, 0.0)


def test_loss_is_weighted_constraint_part():
    g = two_bus(pd=0.5)
    sol = complete_solution(g, np.zeros(2), np.ones(2), np.zeros(1), np.zeros(1))
    total, sup, con = loss(sol, sol, g, C=0.1)
    assert sup == 0.0
    # only bus 2 is out of balance, by pd = 0.5 p.u.
    assert con == pytest.approx(0.5 / 2)
    assert total == pytest.approx(0.1 * con)


def test_loss_monotone_in_balance_violation():
    g = two_bus(pd=0.0)
    base = complete_solution(g, np.zeros(2), np.ones(2), np.zeros(1), np.zeros(1))
    one, two = base.copy(), base.copy()
    one.pg[0], two.pg[0] = 0.1, 0.2
    assert loss(two, base, g)[0] > loss(one, base, g)[0]


def test_supervised_gradient_zero_at_target(case14):
    stats = StandardizationStats.identity()
    p = init_params(ModelConfig(8, 2), 0)
    pred = forward(p, to_typed_graph(case14, stats), case14)
    batch = make_batch([prepare(case14, pred, stats, 0)])
    _, grads, parts = gradient(p, batch, 0.0, stats)
    assert parts["sup"] == pytest.approx(0.0, abs=1e-25)
    assert all(np.all(np.abs(gv) < 1e-12) for gv in grads.values())


def test_hinge_families_flat_inside_limits(case14):
    net = compile_network(case14)
    va = np.zeros(14)
    vm = np.ones(14)

    def fn(q):
        pf, qf, pt, qt = (q["pf"], q["qf"], q["pt"], q["qt"])
        deg = violable_degrees(net, q["va"], q["vm"], np.zeros(5), np.zeros(5), pf, qf, pt, qt)
        return ad.sum(deg["thermal_from"]) + ad.sum(deg["thermal_to"]) + ad.sum(deg["angle_diff"])
    small = 0.01 * np.ones(net.n_branch)
    val, _, grads = ad.value_and_grad(fn, {"va": va + 0.01, "vm": vm, "pf": small, "qf": small,
                                           "pt": small, "qt": small})
    assert val == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_gradient_matches_finite_differences(rng):
    g = random_grid(np.random.default_rng(1), 4)
    sol = solve_pf(g).solution
    stats = StandardizationStats.fit([g], [sol])
    p = _jitter(init_params(ModelConfig(8, 2), 0), rng, 0.1)
    batch = make_batch([prepare(g, sol, stats, "a")])
    _, grads, _ = gradient(p, batch, 0.1, stats)
    worst = 0.0
    h = 1e-5
    for k in p:
        if p[k].size == 0:
            continue
        for _ in range(2):
            i = np.unravel_index(rng.integers(p[k].size), p[k].shape)
            q = {kk: vv.copy() for kk, vv in p.items()}
            q[k][i] += h
            fp = evaluate_loss(q, batch, 0.1, stats)["total"]
            q[k][i] -= 2 * h
            fm = evaluate_loss(q, batch, 0.1, stats)["total"]
            fd = (fp - fm) / (2 * h)
            a = grads[k][i]
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-8))
    assert worst <= 1e-4


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10_000, cfg) == pytest.approx(2e-4, rel=1e-15)
    assert lr_at(14_000, cfg) == pytest.approx(1.8e-4, rel=1e-15)
    assert lr_at(10 ** 7, cfg) == 5e-6
    assert lr_at(5_000, cfg) == pytest.approx(1e-4)
    assert all(lr_at(s, cfg) >= lr_at(s + 1000, cfg) for s in range(10_000, 60_000, 1000))
    with pytest.raises(ValueError):
        TrainConfig(final_lr=1.0)


@pytest.mark.parametrize("steps, hidden", [(48, 128), (60, 128), (36, 384)])
def test_variant_param_counts(steps, hidden):
    cfg = ModelConfig(hidden_size=hidden, num_message_passing_steps=steps)
    params = init_params(cfg, 0)
    assert param_count(params) == expected_param_count(cfg)
    assert sum(k.startswith("proc/") for k in params) == steps * 9 * 6
    del params


def _permuted(grid: Grid, rng) -> Grid:
    return Grid([grid.buses[i] for i in rng.permutation(grid.n_bus)],
                [grid.generators[i] for i in rng.permutation(len(grid.generators))],
                [grid.loads[i] for i in rng.permutation(len(grid.loads))],
                [grid.shunts[i] for i in rng.permutation(len(grid.shunts))],
                [grid.branches[i] for i in rng.permutation(len(grid.branches))], grid.base_mva)


def test_permutation_equivariance(rng):
    g = random_grid(rng, 10)
    h = _permuted(g, rng)
    stats = StandardizationStats.fit([g])
    p = _jitter(init_params(ModelConfig(16, 3), 0), rng, 0.1)
    a = forward(p, to_typed_graph(g, stats), g)
    b = forward(p, to_typed_graph(h, stats), h)
    pos = h.bus_index
    for i, bus in enumerate(g.buses):
        assert b.va[pos[bus.id]] == pytest.approx(a.va[i], abs=1e-10)
        assert b.vm[pos[bus.id]] == pytest.approx(a.vm[i], abs=1e-10)
    gpos = {gen.id: k for k, gen in enumerate(h.generators)}
    for k, gen in enumerate(g.generators):
        assert b.pg[gpos[gen.id]] == pytest.approx(a.pg[k], abs=1e-10)
    bpos = {br.id: k for k, br in enumerate(h.branches)}
    for k, br in enumerate(g.branches):
        assert b.pf[bpos[br.id]] == pytest.approx(a.pf[k], abs=1e-10)


def test_batched_prediction_matches_single(case14, rng):
    stats = StandardizationStats.identity()
    other = random_grid(rng, 7)
    p = init_params(ModelConfig(8, 2), 0)
    sols = predict_batch(p, make_batch([prepare(case14, None, stats), prepare(other, None, stats)]))
    single = forward(p, to_typed_graph(other, stats), other)
    assert sols[1].equals(single) or all(
        np.allclose(getattr(sols[1], f), getattr(single, f), atol=1e-12) for f in ("va", "vm", "pg", "pf"))


def test_batch_positions_cover_each_epoch():
    seen = np.concatenate([batch_positions(s, 10, 5, 0) for s in range(2)])
    assert sorted(seen.tolist()) == list(range(10))
    np.testing.assert_array_equal(batch_positions(3, 10, 5, 0), batch_positions(3, 10, 5, 0))


def test_training_lowers_loss_and_writes_files(small_dataset, tmp_path):
    tc = TrainConfig(total_steps=30, batch_size=4, warmup_steps=5, peak_lr=1e-3, transition_steps=20,
                     eval_every=10, checkpoint_every=10)
    res = train(tc, ModelConfig(16, 2), small_dataset, out_dir=tmp_path)
    assert res.steps == 30
    assert res.validation[-1]["loss_total"] < res.validation[0]["loss_total"]
    assert [r["step"] for r in res.validation] == [0, 10, 20, 30]
    rows = [json.loads(ln) for ln in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(30))
    params, state = load_checkpoint(tmp_path / "checkpoint.npz")
    assert state["step"] == 30
    for k in params:
        np.testing.assert_array_equal(params[k], res.params[k])


def test_resume_matches_uninterrupted(small_dataset, tmp_path):
    kw = dict(batch_size=4, warmup_steps=3, peak_lr=1e-3, transition_steps=10, eval_every=4,
              checkpoint_every=4)
    full = train(TrainConfig(total_steps=8, **kw), ModelConfig(8, 2), small_dataset, out_dir=tmp_path / "a")
    train(TrainConfig(total_steps=4, **kw), ModelConfig(8, 2), small_dataset, out_dir=tmp_path / "b")
    resumed = train(TrainConfig(total_steps=8, **kw), ModelConfig(8, 2), small_dataset,
                    out_dir=tmp_path / "b", resume=tmp_path / "b" / "checkpoint.npz")
    for k in full.params:
        np.testing.assert_allclose(resumed.params[k], full.params[k], rtol=0, atol=1e-12)
    a = [json.loads(ln) for ln in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    b = [json.loads(ln) for ln in (tmp_path / "b" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in b] == list(range(8))
    np.testing.assert_allclose([r["loss_total"] for r in b], [r["loss_total"] for r in a], rtol=1e-12)


def test_resume_rejects_other_model(small_dataset, tmp_path):
    from gridopf.case_io import CheckpointError
    tc = TrainConfig(total_steps=2, batch_size=4, warmup_steps=1, peak_lr=1e-3, transition_steps=10)
    train(tc, ModelConfig(8, 2), small_dataset, out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        train(tc, ModelConfig(8, 3), small_dataset, resume=tmp_path / "checkpoint.npz")


def test_nan_aborts_with_checkpoint(small_dataset, tmp_path):
    bad = small_dataset["train"][0]
    sol = bad.solution.copy()
    sol.pf[:] = np.nan
    ds = dict(small_dataset, train=[Example(bad.grid, sol, bad.meta)])
    tc = TrainConfig(total_steps=3, batch_size=1, warmup_steps=1, peak_lr=1e-3, transition_steps=10)
    with pytest.raises(TrainingError) as err:
        train(tc, ModelConfig(8, 1), ds, out_dir=tmp_path)
    assert "train:0" in str(err.value)
    assert err.value.checkpoint == str(tmp_path / "checkpoint.npz")
    load_checkpoint(err.value.checkpoint)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_size=0)
    with pytest.raises(ValueError):
        ModelConfig(constraint_weight=0.0)
    assert dataclasses.asdict(ModelConfig())["constraint_weight"] == 0.1
