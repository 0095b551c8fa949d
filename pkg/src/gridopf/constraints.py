"""AC-OPF objective, branch-flow derivation and constraint violation degrees.

All functions taking :class:`NetworkArrays` are written against
:mod:`gridopf.autodiff` ops, so they accept numpy arrays (audit) or tensors
(training loss, penalty solver) interchangeably.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import Grid, NetworkArrays, OpfSolution, compile_network

FAMILIES = (
    "ref_angle", "pg_bounds", "qg_bounds", "vm_bounds",
    "p_balance", "q_balance",
    "ohm_from_p", "ohm_from_q", "ohm_to_p", "ohm_to_q",
    "thermal_from", "thermal_to", "angle_diff",
)
# Families not guaranteed by construction for a model whose bounds are
# sigmoid-enforced and whose flows are derived from voltages.
VIOLABLE_PRE_PF = ("p_balance", "q_balance", "thermal_from", "thermal_to", "angle_diff")


def objective_cost(grid: Grid, solution: OpfSolution) -> float:
    """Generation cost in $/h; the constant offset ``c0`` is not part of it."""
    net = compile_network(grid)
    pg = np.asarray(solution.pg, dtype=np.float64)
    return float(np.sum(net.c2 * pg * pg + net.c1 * pg))


def cost(net: NetworkArrays, pg):
    return ad.sum(net.c2 * ad.square(pg) + net.c1 * pg)


def branch_flows(net: NetworkArrays, va, vm):
    """Π-model flows ``(pf, qf, pt, qt)`` withdrawn at each branch end."""
    vf = ad.take(vm, net.f)
    vt = ad.take(vm, net.t)
    delta = ad.take(va, net.f) - ad.take(va, net.t) - net.shift
    c = ad.cos(delta)
    s = ad.sin(delta)
    vv = vf * vt / net.tap
    tap2 = net.tap * net.tap
    g, b = net.g, net.b
    pf = g * ad.square(vf) / tap2 - vv * (g * c + b * s)
    qf = -(b + net.b_fr) * ad.square(vf) / tap2 - vv * (g * s - b * c)
    pt = g * ad.square(vt) - vv * (g * c - b * s)
    qt = -(b + net.b_to) * ad.square(vt) + vv * (g * s + b * c)
    return pf, qf, pt, qt


def derive_branch_flows(grid: Grid, va, vm):
    return branch_flows(compile_network(grid), np.asarray(va, float), np.asarray(vm, float))


def complete_solution(grid: Grid, va, vm, pg, qg) -> OpfSolution:
    """Solution whose branch flows are derived from the given voltages."""
    pf, qf, pt, qt = derive_branch_flows(grid, va, vm)
    return OpfSolution(va=va, vm=vm, pg=pg, qg=qg, pf=pf, qf=qf, pt=pt, qt=qt)


def balance_mismatch(net: NetworkArrays, vm, pg, qg, pf, qf, pt, qt):
    """Injection minus withdrawal per bus: ``(p_mis, q_mis)``."""
    nb = net.n_bus
    vm2 = ad.square(vm)
    p_out = ad.segment_sum(pf, net.f, nb) + ad.segment_sum(pt, net.t, nb)
    q_out = ad.segment_sum(qf, net.f, nb) + ad.segment_sum(qt, net.t, nb)
    p_mis = ad.segment_sum(pg, net.gen_bus, nb) - net.pd_bus - net.gs_bus * vm2 - p_out
    q_mis = ad.segment_sum(qg, net.gen_bus, nb) - net.qd_bus + net.bs_bus * vm2 - q_out
    return p_mis, q_mis


def _box(x, lo, hi):
    return ad.relu(lo - x) + ad.relu(x - hi)


def violable_degrees(net: NetworkArrays, va, vm, pg, qg, pf, qf, pt, qt) -> dict:
    """Degrees for the families a bounded, flow-deriving model can still violate."""
    p_mis, q_mis = balance_mismatch(net, vm, pg, qg, pf, qf, pt, qt)
    dtheta = ad.take(va, net.f) - ad.take(va, net.t)
    return {
        "p_balance": ad.abs(p_mis),
        "q_balance": ad.abs(q_mis),
        "thermal_from": ad.relu(ad.hypot(pf, qf) - net.rate),
        "thermal_to": ad.relu(ad.hypot(pt, qt) - net.rate),
        "angle_diff": _box(dtheta, net.angmin, net.angmax),
    }


def degrees_from_arrays(net: NetworkArrays, va, vm, pg, qg, pf, qf, pt, qt) -> dict:
    out = {
        "ref_angle": np.abs(np.asarray(va)[net.ref_mask]),
        "pg_bounds": _box(pg, net.pmin, net.pmax),
        "qg_bounds": _box(qg, net.qmin, net.qmax),
        "vm_bounds": _box(vm, net.vmin, net.vmax),
    }
    out.update(violable_degrees(net, va, vm, pg, qg, pf, qf, pt, qt))
    dpf, dqf, dpt, dqt = branch_flows(net, va, vm)
    out["ohm_from_p"] = np.abs(pf - dpf)
    out["ohm_from_q"] = np.abs(qf - dqf)
    out["ohm_to_p"] = np.abs(pt - dpt)
    out["ohm_to_q"] = np.abs(qt - dqt)
    return {k: np.asarray(out[k], dtype=np.float64) for k in FAMILIES}


@dataclass
class ViolationReport:
    """Per-entity violation degrees (p.u.) grouped by constraint family."""

    degrees: dict[str, np.ndarray] = field(default_factory=dict)

    def mean(self) -> dict[str, float | None]:
        return {k: (float(np.mean(v)) if v.size else None) for k, v in self.degrees.items()}

    def max(self) -> dict[str, float | None]:
        return {k: (float(np.max(v)) if v.size else None) for k, v in self.degrees.items()}

    def __getitem__(self, family: str) -> np.ndarray:
        return self.degrees[family]

    def subset(self, families) -> ViolationReport:
        return ViolationReport({k: self.degrees[k] for k in families})

    @staticmethod
    def pooled(reports: list[ViolationReport]) -> ViolationReport:
        """Concatenate entity degrees across examples, family by family."""
        keys = reports[0].degrees.keys() if reports else ()
        return ViolationReport({k: np.concatenate([r.degrees[k] for r in reports]) for k in keys})


def violation_degrees(grid: Grid, solution: OpfSolution) -> ViolationReport:
    solution.check_shape(grid)
    net = compile_network(grid)
    arrays = {k: getattr(solution, k) for k in ("va", "vm", "pg", "qg", "pf", "qf", "pt", "qt")}
    return ViolationReport(degrees_from_arrays(net, **arrays))


def feasibility_at_threshold(report: ViolationReport, tau: float) -> dict[str, float | None]:
    """Percentage of entities per family whose degree is strictly below ``tau``.

    Empty families map to ``None`` (not applicable).
    """
    if not tau > 0:
        raise ValueError("threshold must be positive")
    out = {}
    for k, v in report.degrees.items():
        out[k] = None if v.size == 0 else 100.0 * np.count_nonzero(v < tau) / v.size
    return out


def finite_box(lo, hi, span: float = 10.0):
    """Replace infinite bounds by finite ones ``span`` p.u. from the other side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    both = ~np.isfinite(lo) & ~np.isfinite(hi)
    lo_f = np.where(np.isfinite(lo), lo, hi - span)
    hi_f = np.where(np.isfinite(hi), hi, lo + span)
    return np.where(both, -span, lo_f), np.where(both, span, hi_f)


def sigmoid_bound(raw, lo, hi):
    """Map unconstrained ``raw`` into ``[lo, hi]``; exact when ``lo == hi``."""
    return lo + (hi - lo) * ad.sigmoid(raw)


def logit_bound(value, lo, hi, margin: float = 1e-3):
    """Inverse of :func:`sigmoid_bound`, clipped away from the ends."""
    width = np.where(hi > lo, hi - lo, 1.0)
    u = np.clip((np.asarray(value) - lo) / width, margin, 1 - margin)
    return np.log(u / (1 - u))
