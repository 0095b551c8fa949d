import dataclasses

import numpy as np
import pytest

from gridopf.case_io import parse_case
from gridopf.graph import (EDGE_FEATURES, NODE_FEATURES, StandardizationStats, batch_graphs, raw_edges,
                           raw_node_features, to_typed_graph)
from gridopf.synthetic import random_grid
from helpers import synthetic_case, two_bus


def test_case500_graph_counts():
    g = to_typed_graph(parse_case(synthetic_case()), StandardizationStats.identity())
    assert g.counts() == {"bus": 500, "generator": 171, "load": 281, "shunt": 31,
                          "ac_line": 536, "transformer": 192,
                          "gen_link": 171, "load_link": 281, "shunt_link": 31}


def test_no_shunts():
    g = to_typed_graph(two_bus(), StandardizationStats.identity())
    assert g.nodes["shunt"].shape == (0, len(NODE_FEATURES["shunt"]))
    assert len(g.edges["shunt_link"][0]) == 0


def test_identity_stats_pass_through(case14):
    g = to_typed_graph(case14, StandardizationStats.identity())
    raw_n = raw_node_features(case14)
    raw_e = raw_edges(case14)
    for t, x in raw_n.items():
        np.testing.assert_array_equal(g.nodes[t], x)
    for t in EDGE_FEATURES:
        np.testing.assert_array_equal(g.edges[t][2], raw_e[t][2])
        np.testing.assert_array_equal(g.edges[t][0], raw_e[t][0])


def test_fit_standardizes(rng):
    grids = [random_grid(rng, 8) for _ in range(20)]
    stats = StandardizationStats.fit(grids)
    stacked = np.concatenate([to_typed_graph(g, stats).nodes["load"] for g in grids])
    np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-12)
    back = StandardizationStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(back.node_mean["bus"], stats.node_mean["bus"])


def test_constant_feature_is_not_divided_by_zero(case14):
    stats = StandardizationStats.fit([case14, case14])
    g = to_typed_graph(case14, stats)
    for x in g.nodes.values():
        assert np.all(np.isfinite(x))


def test_batching_offsets(case14, rng):
    stats = StandardizationStats.identity()
    other = random_grid(rng, 6)
    a, b = to_typed_graph(case14, stats), to_typed_graph(other, stats)
    ab = batch_graphs([a, b])
    assert ab.n_graph == 2
    src, dst, _ = ab.edges["ac_line"]
    n_a = len(a.edges["ac_line"][0])
    np.testing.assert_array_equal(src[n_a:], b.edges["ac_line"][0] + 14)
    gsrc, gdst, _ = ab.edges["gen_link"]
    np.testing.assert_array_equal(gsrc[5:], b.edges["gen_link"][0] + 5)
    np.testing.assert_array_equal(gdst[5:], b.edges["gen_link"][1] + 14)
    np.testing.assert_array_equal(ab.node_graph["bus"], np.repeat([0, 1], [14, 6]))


def test_batching_rejects_mixed_stats(case14):
    a = to_typed_graph(case14, StandardizationStats.identity())
    b = dataclasses.replace(a, va_std=2.0)
    with pytest.raises(ValueError):
        batch_graphs([a, b])
