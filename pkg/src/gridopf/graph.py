"""Heterogeneous graph view of a grid and feature standardization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BranchKind, BusType, Grid, OpfSolution

NODE_TYPES = ("bus", "generator", "load", "shunt")
# edge type -> (source node type, destination node type)
EDGE_TYPES = {
    "ac_line": ("bus", "bus"),
    "transformer": ("bus", "bus"),
    "gen_link": ("generator", "bus"),
    "load_link": ("load", "bus"),
    "shunt_link": ("shunt", "bus"),
}
BUS_TYPE_ORDER = (BusType.PQ, BusType.PV, BusType.REF, BusType.INACTIVE)
NODE_FEATURES = {
    "bus": ("base_kv", "type_pq", "type_pv", "type_ref", "type_inactive", "vmin", "vmax"),
    "generator": ("mbase", "pg", "pmin", "pmax", "qg", "qmin", "qmax", "vg",
                  "cost_squared", "cost_linear", "cost_offset"),
    "load": ("pd", "qd"),
    "shunt": ("bs", "gs"),
}
_LINE = ("angmin", "angmax", "b_fr", "b_to", "br_r", "br_x", "rate_a", "rate_b", "rate_c")
EDGE_FEATURES = {
    "ac_line": _LINE,
    "transformer": _LINE + ("tap", "shift"),
    "gen_link": (),
    "load_link": (),
    "shunt_link": (),
}
TARGET_FIELDS = ("va", "vm", "pg", "qg", "pf", "qf", "pt", "qt")


def raw_node_features(grid: Grid) -> dict[str, np.ndarray]:
    bus = np.array([[b.base_kv, *(float(b.bus_type == t) for t in BUS_TYPE_ORDER), b.vmin, b.vmax]
                    for b in grid.buses], dtype=np.float64).reshape(-1, 7)
    gen = np.array([[g.mbase, g.pg, g.pmin, g.pmax, g.qg, g.qmin, g.qmax, g.vg,
                     g.cost_squared, g.cost_linear, g.cost_offset] for g in grid.generators],
                   dtype=np.float64).reshape(-1, 11)
    load = np.array([[ld.pd, ld.qd] for ld in grid.loads], dtype=np.float64).reshape(-1, 2)
    shunt = np.array([[s.bs, s.gs] for s in grid.shunts], dtype=np.float64).reshape(-1, 2)
    return {"bus": bus, "generator": gen, "load": load, "shunt": shunt}


def _branch_row(br, with_tap: bool) -> list[float]:
    row = [br.angmin, br.angmax, br.b_fr, br.b_to, br.br_r, br.br_x, br.rate_a, br.rate_b, br.rate_c]
    return row + [br.tap, br.shift] if with_tap else row


def raw_edges(grid: Grid) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
    """Edge type -> ``(src, dst, features, element_position)`` before standardization.

    ``element_position`` is the index of the element in its grid list (the
    branch position for branch edges, the subnode position for link edges).
    """
    idx = grid.bus_index
    out = {}
    for name, kind in (("ac_line", BranchKind.AC_LINE), ("transformer", BranchKind.TRANSFORMER)):
        pos = np.array([i for i, br in enumerate(grid.branches) if br.kind is kind], dtype=np.int64)
        brs = [grid.branches[i] for i in pos]
        d = len(EDGE_FEATURES[name])
        out[name] = (np.array([idx[br.from_bus] for br in brs], dtype=np.int64),
                     np.array([idx[br.to_bus] for br in brs], dtype=np.int64),
                     np.array([_branch_row(br, name == "transformer") for br in brs],
                              dtype=np.float64).reshape(-1, d),
                     pos)
    for name, items in (("gen_link", grid.generators), ("load_link", grid.loads),
                        ("shunt_link", grid.shunts)):
        n = len(items)
        out[name] = (np.arange(n, dtype=np.int64),
                     np.array([idx[it.bus_id] for it in items], dtype=np.int64),
                     np.zeros((n, 0)), np.arange(n, dtype=np.int64))
    return out


@dataclass
class StandardizationStats:
    """Per-feature mean/std for inputs (per type) and per-field targets."""

    node_mean: dict[str, np.ndarray] = field(default_factory=dict)
    node_std: dict[str, np.ndarray] = field(default_factory=dict)
    edge_mean: dict[str, np.ndarray] = field(default_factory=dict)
    edge_std: dict[str, np.ndarray] = field(default_factory=dict)
    target_mean: dict[str, float] = field(default_factory=dict)
    target_std: dict[str, float] = field(default_factory=dict)

    @staticmethod
    def identity() -> StandardizationStats:
        s = StandardizationStats()
        for t, names in NODE_FEATURES.items():
            s.node_mean[t], s.node_std[t] = np.zeros(len(names)), np.ones(len(names))
        for t, names in EDGE_FEATURES.items():
            s.edge_mean[t], s.edge_std[t] = np.zeros(len(names)), np.ones(len(names))
        for k in TARGET_FIELDS:
            s.target_mean[k], s.target_std[k] = 0.0, 1.0
        return s

    @staticmethod
    def fit(grids: list[Grid], solutions: list[OpfSolution | None] | None = None) -> StandardizationStats:
        """Statistics over a training split; zero std is replaced by 1."""
        s = StandardizationStats()

        def moments(rows, d):
            x = np.concatenate(rows, axis=0) if rows else np.zeros((0, d))
            if len(x) == 0:
                return np.zeros(d), np.ones(d)
            sd = x.std(axis=0)
            return x.mean(axis=0), np.where(sd > 0, sd, 1.0)

        nodes = [raw_node_features(g) for g in grids]
        edges = [raw_edges(g) for g in grids]
        for t, names in NODE_FEATURES.items():
            s.node_mean[t], s.node_std[t] = moments([n[t] for n in nodes], len(names))
        for t, names in EDGE_FEATURES.items():
            s.edge_mean[t], s.edge_std[t] = moments([e[t][2] for e in edges], len(names))
        sols = [x for x in (solutions or []) if x is not None]
        for k in TARGET_FIELDS:
            v = np.concatenate([getattr(x, k) for x in sols]) if sols else np.zeros(0)
            v = v[np.isfinite(v)]
            sd = float(v.std()) if v.size else 0.0
            s.target_mean[k] = float(v.mean()) if v.size else 0.0
            s.target_std[k] = sd if sd > 0 else 1.0
        return s

    def to_dict(self) -> dict:
        conv = lambda d: {k: [float(x) for x in v] for k, v in d.items()}
        return {"node_mean": conv(self.node_mean), "node_std": conv(self.node_std),
                "edge_mean": conv(self.edge_mean), "edge_std": conv(self.edge_std),
                "target_mean": dict(self.target_mean), "target_std": dict(self.target_std)}

    @staticmethod
    def from_dict(d: dict) -> StandardizationStats:
        conv = lambda m: {k: np.asarray(v, dtype=np.float64) for k, v in m.items()}
        return StandardizationStats(conv(d["node_mean"]), conv(d["node_std"]),
                                    conv(d["edge_mean"]), conv(d["edge_std"]),
                                    {k: float(v) for k, v in d["target_mean"].items()},
                                    {k: float(v) for k, v in d["target_std"].items()})


@dataclass(frozen=True)
class TypedGraph:
    """Standardized node/edge features of one grid or a disjoint batch.

    ``edges[t] = (src, dst, features)`` with indices into the node sets of
    ``EDGE_TYPES[t]``.  ``node_graph[t]`` maps each node to its example.
    ``va_mean``/``va_std`` de-standardize the decoded voltage angle.
    """

    nodes: dict[str, np.ndarray]
    edges: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]
    node_graph: dict[str, np.ndarray]
    n_graph: int = 1
    va_mean: float = 0.0
    va_std: float = 1.0

    def counts(self) -> dict[str, int]:
        out = {t: len(v) for t, v in self.nodes.items()}
        out.update({t: len(e[0]) for t, e in self.edges.items()})
        return out


def to_typed_graph(grid: Grid, stats: StandardizationStats) -> TypedGraph:
    nodes = raw_node_features(grid)
    edges = raw_edges(grid)
    out_nodes, out_edges = {}, {}
    for t in NODE_TYPES:
        x = nodes[t]
        if stats.node_mean[t].shape != (x.shape[1],):
            raise ValueError(f"{t} feature dimension {x.shape[1]} does not match stats "
                             f"{stats.node_mean[t].shape}")
        out_nodes[t] = (x - stats.node_mean[t]) / stats.node_std[t]
    for t in EDGE_TYPES:
        src, dst, x, _ = edges[t]
        if stats.edge_mean[t].shape != (x.shape[1],):
            raise ValueError(f"{t} feature dimension {x.shape[1]} does not match stats "
                             f"{stats.edge_mean[t].shape}")
        out_edges[t] = (src, dst, (x - stats.edge_mean[t]) / stats.edge_std[t])
    node_graph = {t: np.zeros(len(v), dtype=np.int64) for t, v in out_nodes.items()}
    return TypedGraph(out_nodes, out_edges, node_graph, 1,
                      float(stats.target_mean["va"]), float(stats.target_std["va"]))


def batch_graphs(graphs: list[TypedGraph]) -> TypedGraph:
    """Disjoint union; node indices of later graphs are offset.

    All graphs must share the same standardization.
    """
    if len({(g.va_mean, g.va_std) for g in graphs}) > 1:
        raise ValueError("graphs were built with different standardization stats")
    offsets = {t: np.cumsum([0] + [len(g.nodes[t]) for g in graphs[:-1]]) for t in NODE_TYPES}
    g_off = np.cumsum([0] + [g.n_graph for g in graphs[:-1]])
    nodes = {t: np.concatenate([g.nodes[t] for g in graphs], axis=0) for t in NODE_TYPES}
    node_graph = {t: np.concatenate([g.node_graph[t] + o for g, o in zip(graphs, g_off)])
                  for t in NODE_TYPES}
    edges = {}
    for t, (st, dt) in EDGE_TYPES.items():
        src = np.concatenate([g.edges[t][0] + offsets[st][i] for i, g in enumerate(graphs)])
        dst = np.concatenate([g.edges[t][1] + offsets[dt][i] for i, g in enumerate(graphs)])
        feat = np.concatenate([g.edges[t][2] for g in graphs], axis=0)
        edges[t] = (src.astype(np.int64), dst.astype(np.int64), feat)
    return TypedGraph(nodes, edges, node_graph, int(sum(g.n_graph for g in graphs)),
                      graphs[0].va_mean, graphs[0].va_std)
