"""Typed-graph encode-process-decode model with bounded outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..constraints import VIOLABLE_PRE_PF, branch_flows, finite_box, sigmoid_bound, violable_degrees
from ..graph import (EDGE_FEATURES, EDGE_TYPES, NODE_FEATURES, NODE_TYPES, StandardizationStats,
                     TypedGraph, batch_graphs, to_typed_graph)
from ..grid import Grid, NetworkArrays, OpfSolution, compile_network

# decoded node type -> names of its two raw outputs
HEADS = {"bus": ("va", "vm"), "generator": ("pg", "qg")}
GROUPS = {"bus": ("va", "vm"), "generator": ("pg", "qg"), "branch": ("pf", "qf", "pt", "qt")}


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 128
    num_message_passing_steps: int = 48
    decoder_mlp_size: int = 256
    constraint_weight: float = 0.1

    def __post_init__(self):
        for name in ("hidden_size", "num_message_passing_steps", "decoder_mlp_size"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.constraint_weight > 0:
            raise ValueError("constraint_weight must be positive")


def _glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / max(n_in + n_out, 1))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit layer-norm scales."""
    rng = np.random.default_rng(seed)
    H, D = cfg.hidden_size, cfg.decoder_mlp_size
    p = {}

    def linear(prefix, n_in, n_out):
        p[f"{prefix}/w"] = _glorot(rng, n_in, n_out)
        p[f"{prefix}/b"] = np.zeros(n_out)

    def mlp(prefix):
        linear(f"{prefix}/l1", 3 * H, H)
        linear(f"{prefix}/l2", H, H)
        p[f"{prefix}/ln_scale"] = np.ones(H)
        p[f"{prefix}/ln_offset"] = np.zeros(H)

    for t, names in NODE_FEATURES.items():
        linear(f"enc/node/{t}", len(names), H)
    for t, names in EDGE_FEATURES.items():
        linear(f"enc/edge/{t}", len(names), H)
    for s in range(cfg.num_message_passing_steps):
        for t in EDGE_TYPES:
            mlp(f"proc/{s}/edge/{t}")
        for t in NODE_TYPES:
            mlp(f"proc/{s}/node/{t}")
    for t, outs in HEADS.items():
        linear(f"dec/{t}/l1", H, D)
        linear(f"dec/{t}/l2", D, D)
        linear(f"dec/{t}/head", D, len(outs))
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    H, D, S = cfg.hidden_size, cfg.decoder_mlp_size, cfg.num_message_passing_steps
    enc = sum((len(f) + 1) * H for f in NODE_FEATURES.values())
    enc += sum((len(f) + 1) * H for f in EDGE_FEATURES.values())
    block = 3 * H * H + H + H * H + H + 2 * H
    proc = S * (len(EDGE_TYPES) + len(NODE_TYPES)) * block
    dec = sum(H * D + D + D * D + D + D * len(o) + len(o) for o in HEADS.values())
    return enc + proc + dec


def _linear(p, prefix, x):
    return ad.matmul(x, p[f"{prefix}/w"]) + p[f"{prefix}/b"]


def _mlp(p, prefix, x):
    h = ad.relu(_linear(p, f"{prefix}/l1", x))
    h = _linear(p, f"{prefix}/l2", h)
    return ad.layer_norm(h, p[f"{prefix}/ln_scale"], p[f"{prefix}/ln_offset"])


def _n_steps(params) -> int:
    steps = {int(k.split("/")[1]) for k in params if k.startswith("proc/")}
    return max(steps) + 1 if steps else 0


def _hidden(params) -> int:
    return int(np.shape(params["enc/node/bus/b"])[0])


def latent(params, graph: TypedGraph) -> dict:
    """Processed node latents per node type."""
    H = _hidden(params)
    h = {t: _linear(params, f"enc/node/{t}", graph.nodes[t]) for t in NODE_TYPES}
    e = {}
    for t in EDGE_TYPES:
        feat = graph.edges[t][2]
        e[t] = _linear(params, f"enc/edge/{t}", feat) if feat.shape[1] else \
            ad.add(np.zeros((len(feat), H)), params[f"enc/edge/{t}/b"])
    n_nodes = {t: len(graph.nodes[t]) for t in NODE_TYPES}
    for s in range(_n_steps(params)):
        new_e = {}
        for t, (st, dt) in EDGE_TYPES.items():
            src, dst, _ = graph.edges[t]
            inp = ad.concat([e[t], ad.take(h[st], src), ad.take(h[dt], dst)], axis=1)
            new_e[t] = e[t] + _mlp(params, f"proc/{s}/edge/{t}", inp)
        new_h = {}
        for n in NODE_TYPES:
            incoming = np.zeros((n_nodes[n], H))
            outgoing = np.zeros((n_nodes[n], H))
            for t, (st, dt) in EDGE_TYPES.items():
                src, dst, _ = graph.edges[t]
                if dt == n:
                    incoming = incoming + ad.segment_sum(new_e[t], dst, n_nodes[n])
                if st == n:
                    outgoing = outgoing + ad.segment_sum(new_e[t], src, n_nodes[n])
            inp = ad.concat([h[n], incoming, outgoing], axis=1)
            new_h[n] = h[n] + _mlp(params, f"proc/{s}/node/{n}", inp)
        h, e = new_h, new_e
    return h


def decode_raw(params, h: dict) -> dict:
    out = {}
    for t, names in HEADS.items():
        z = ad.relu(_linear(params, f"dec/{t}/l1", h[t]))
        z = ad.relu(_linear(params, f"dec/{t}/l2", z))
        raw = _linear(params, f"dec/{t}/head", z)
        for j, name in enumerate(names):
            out[name] = ad.getitem(raw, (slice(None), j))
    return out


def bound_outputs(raw: dict, net: NetworkArrays, va_mean: float = 0.0, va_std: float = 1.0) -> dict:
    """Bounded physical variables plus derived branch flows.

    The angle head works in standardized units; REF angles are forced to 0.
    """
    pmin, pmax = finite_box(net.pmin, net.pmax)
    qmin, qmax = finite_box(net.qmin, net.qmax)
    out = {
        "va": ad.where(net.ref_mask, 0.0, va_mean + va_std * raw["va"]),
        "vm": sigmoid_bound(raw["vm"], net.vmin, net.vmax),
        "pg": sigmoid_bound(raw["pg"], pmin, pmax),
        "qg": sigmoid_bound(raw["qg"], qmin, qmax),
    }
    out["pf"], out["qf"], out["pt"], out["qt"] = branch_flows(net, out["va"], out["vm"])
    return out


def predict_arrays(params, graph: TypedGraph, net: NetworkArrays) -> dict:
    counts = {"bus": net.n_bus, "generator": net.n_gen}
    for t, n in counts.items():
        if len(graph.nodes[t]) != n:
            raise ValueError(f"graph has {len(graph.nodes[t])} {t} nodes, grid has {n}")
    if len(graph.edges["ac_line"][0]) + len(graph.edges["transformer"][0]) != net.n_branch:
        raise ValueError("graph branch edges do not match grid branches")
    return bound_outputs(decode_raw(params, latent(params, graph)), net, graph.va_mean, graph.va_std)


def forward(params, graph: TypedGraph, grid: Grid) -> OpfSolution:
    """Predicted OPF solution for a single grid."""
    net = compile_network(grid)
    out = predict_arrays(params, graph, net)
    return OpfSolution(**{k: np.array(ad.value(v), dtype=np.float64) for k, v in out.items()})


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _per_graph_mean(x, ids, n_graph):
    """Per-graph mean of a vector; graphs with no entries contribute 0."""
    counts = np.bincount(ids, minlength=n_graph).astype(np.float64)
    return ad.segment_sum(x, ids, n_graph) / np.maximum(counts, 1.0)


def loss_terms(pred: dict, target: dict | None, net: NetworkArrays,
               stats: StandardizationStats | None) -> tuple:
    """Per-graph ``(supervised, constraint)`` vectors.

    The supervised term is the group-wise mean squared error on standardized
    values summed over the bus, generator and branch groups; the constraint
    term sums the per-family mean violation degree in per-unit.
    """
    ng = net.n_graph
    ids = {"bus": net.bus_graph, "generator": net.gen_graph, "branch": net.branch_graph}
    sup = np.zeros(ng)
    if target is not None:
        stats = stats or StandardizationStats.identity()
        for group, names in GROUPS.items():
            sq = None
            for k in names:
                d = ad.square((pred[k] - target[k]) / stats.target_std[k])
                sq = d if sq is None else sq + d
            sup = sup + _per_graph_mean(sq, ids[group], ng) / len(names)
    deg = violable_degrees(net, **{k: pred[k] for k in ("va", "vm", "pg", "qg", "pf", "qf", "pt", "qt")})
    con = np.zeros(ng)
    for fam in VIOLABLE_PRE_PF:
        grp = ids["bus"] if fam in ("p_balance", "q_balance") else ids["branch"]
        con = con + _per_graph_mean(deg[fam], grp, ng)
    return sup, con


def loss(pred: OpfSolution, target: OpfSolution | None, grid: Grid, C: float = 0.1,
         stats: StandardizationStats | None = None) -> tuple[float, float, float]:
    """``(total, supervised, constraint)`` for one solution."""
    net = compile_network(grid)
    p = {k: getattr(pred, k) for k in GROUPS["bus"] + GROUPS["generator"] + GROUPS["branch"]}
    t = None if target is None else {k: getattr(target, k) for k in p}
    sup, con = loss_terms(p, t, net, stats)
    sup, con = float(sup[0]), float(con[0])
    return sup + C * con, sup, con


# ---------------------------------------------------------------------------
# Batches and gradients
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    graph: TypedGraph
    net: NetworkArrays
    target: dict | None
    ids: list

    @property
    def size(self) -> int:
        return self.net.n_graph


@dataclass
class Prepared:
    """One example converted once for repeated batching."""

    graph: TypedGraph
    net: NetworkArrays
    target: OpfSolution | None
    id: object


def prepare(grid: Grid, target: OpfSolution | None, stats: StandardizationStats, ex_id=None) -> Prepared:
    return Prepared(to_typed_graph(grid, stats), compile_network(grid), target, ex_id)


def make_batch(items: list[Prepared]) -> Batch:
    if not items:
        raise ValueError("empty batch")
    graph = batch_graphs([it.graph for it in items])
    net = NetworkArrays.concat([it.net for it in items])
    target = None
    if all(it.target is not None for it in items):
        target = {k: np.concatenate([getattr(it.target, k) for it in items])
                  for names in GROUPS.values() for k in names}
    return Batch(graph, net, target, [it.id for it in items])


def _batch_loss(params, batch: Batch, C: float, stats):
    pred = predict_arrays(params, batch.graph, batch.net)
    sup, con = loss_terms(pred, batch.target, batch.net, stats)
    per_ex = sup + C * con
    total = ad.mean(per_ex)
    return total, (ad.value(per_ex), ad.value(sup), ad.value(con))


def gradient(params, batch: Batch, C: float = 0.1, stats: StandardizationStats | None = None):
    """Mean batch loss and its exact gradient.

    Returns ``(loss, grads, parts)`` with ``parts = {"sup", "con"}`` batch
    means.  Raises ``FloatingPointError`` naming the first example whose loss
    is not finite.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        value, (per_ex, sup, con), grads = ad.value_and_grad(_batch_loss, params, batch, C, stats)
    bad = np.flatnonzero(~np.isfinite(np.asarray(per_ex)))
    if bad.size:
        raise FloatingPointError(f"non-finite loss for example {batch.ids[bad[0]]}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise FloatingPointError(f"non-finite gradient in batch {batch.ids}")
    return value, grads, {"sup": float(np.mean(sup)), "con": float(np.mean(con))}


def evaluate_loss(params, batch: Batch, C: float = 0.1, stats=None) -> dict:
    """Batch-mean losses without building a tape."""
    total, (per_ex, sup, con) = _batch_loss(params, batch, C, stats)
    return {"total": float(np.asarray(total)), "sup": float(np.mean(sup)), "con": float(np.mean(con))}


def predict_batch(params, batch: Batch) -> list[OpfSolution]:
    """Split batched predictions back into per-example solutions."""
    out = predict_arrays(params, batch.graph, batch.net)
    net = batch.net
    sols = []
    for i in range(batch.size):
        b, g, l = net.bus_graph == i, net.gen_graph == i, net.branch_graph == i
        sols.append(OpfSolution(va=out["va"][b], vm=out["vm"][b], pg=out["pg"][g], qg=out["qg"][g],
                                pf=out["pf"][l], qf=out["qf"][l], pt=out["pt"][l], qt=out["qt"][l]))
    return sols
