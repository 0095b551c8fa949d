"""Evaluation of predicted OPF solutions against reference labels."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..acpf import PfOptions, restore
from ..case_io import Example
from ..constraints import (VIOLABLE_PRE_PF, ViolationReport, feasibility_at_threshold, objective_cost,
                           violation_degrees)
from ..grid import BusType, Grid, OpfSolution
from ..metrics import mse, optimality_ratio, trmae

THRESHOLDS = (1e-2, 1e-4, 1e-6, 1e-8)
# (group, field) rows of the supervised tables; branch fields split by kind
SUPERVISED_ROWS = (
    ("bus", "va"), ("bus", "vm"), ("gen", "pg"), ("gen", "qg"),
    ("line", "pf"), ("line", "pt"), ("line", "qf"), ("line", "qt"),
    ("transformer", "pf"), ("transformer", "pt"), ("transformer", "qf"), ("transformer", "qt"),
)
PRE_PF_FAMILIES = VIOLABLE_PRE_PF
POST_PF_FAMILIES = ("thermal_from", "thermal_to", "angle_diff", "vm_bounds_pq", "vm_bounds_pv",
                    "qg_bounds_slack", "pg_bounds_slack")

Predictor = Callable[[Grid], OpfSolution]


def row_key(group: str, fld: str) -> str:
    return f"{group}.{fld}"


def supervised_values(grid: Grid, sol: OpfSolution) -> dict[str, np.ndarray]:
    """Arrays per supervised row, branch fields split into lines and transformers."""
    trafo = np.array([br.kind.value == "transformer" for br in grid.branches], dtype=bool) \
        if grid.branches else np.zeros(0, dtype=bool)
    out = {}
    for group, fld in SUPERVISED_ROWS:
        v = np.asarray(getattr(sol, fld), dtype=np.float64)
        if group == "line":
            v = v[~trafo]
        elif group == "transformer":
            v = v[trafo]
        out[row_key(group, fld)] = v
    return out


def post_pf_degrees(grid: Grid, sol: OpfSolution) -> ViolationReport:
    """Families that power flow can still violate, restricted by unit type.

    Voltage bounds are split into PQ and PV buses (a bus is PV when it is not
    REF and hosts a generator); generator bounds are reported for REF-bus
    generators only.
    """
    rep = violation_degrees(grid, sol)
    ref = np.array([b.bus_type == BusType.REF for b in grid.buses], dtype=bool)
    gen_bus = np.array([grid.bus_index[g.bus_id] for g in grid.generators], dtype=np.int64)
    has_gen = np.zeros(grid.n_bus, dtype=bool)
    has_gen[gen_bus] = True
    pv = has_gen & ~ref
    pq = ~has_gen & ~ref
    slack_gen = ref[gen_bus] if len(gen_bus) else np.zeros(0, dtype=bool)
    return ViolationReport({
        "thermal_from": rep["thermal_from"],
        "thermal_to": rep["thermal_to"],
        "angle_diff": rep["angle_diff"],
        "vm_bounds_pq": rep["vm_bounds"][pq],
        "vm_bounds_pv": rep["vm_bounds"][pv],
        "qg_bounds_slack": rep["qg_bounds"][slack_gen],
        "pg_bounds_slack": rep["pg_bounds"][slack_gen],
    })


def _summary(rep: ViolationReport) -> dict[str, dict[str, float | None]]:
    means, maxes = rep.mean(), rep.max()
    out = {}
    for k, v in rep.degrees.items():
        if v.size and not np.all(np.isfinite(v)):
            out[k] = {"mean": None, "max": None}   # quantity absent (e.g. DC reactive)
        else:
            out[k] = {"mean": means[k], "max": maxes[k]}
    return out


def _thresholds(rep: ViolationReport) -> dict[str, dict[str, float | None]]:
    finite = ViolationReport({k: v for k, v in rep.degrees.items() if np.all(np.isfinite(v))})
    out = {}
    for tau in THRESHOLDS:
        row = feasibility_at_threshold(finite, tau)
        out[f"{tau:g}"] = {k: row.get(k) for k in rep.degrees}
    return out


def _error_tables(preds: list[dict], refs: list[dict]) -> tuple[dict, dict]:
    t, m = {}, {}
    for group, fld in SUPERVISED_ROWS:
        k = row_key(group, fld)
        p = np.concatenate([x[k] for x in preds]) if preds else np.zeros(0)
        r = np.concatenate([x[k] for x in refs]) if refs else np.zeros(0)
        if p.size and not np.all(np.isfinite(p)):
            t[k] = m[k] = None    # absent in the prediction (DC reactive fields)
            continue
        t[k] = trmae(p, r)
        m[k] = mse(p, r)
    return t, m


def _stat(xs) -> dict[str, float | None]:
    if not xs:
        return {"mean": None, "median": None}
    return {"mean": float(np.mean(xs)), "median": float(np.median(xs))}


@dataclass
class EvalReport:
    n_examples: int = 0
    trmae_pre: dict = field(default_factory=dict)
    mse_pre: dict = field(default_factory=dict)
    trmae_post: dict = field(default_factory=dict)
    mse_post: dict = field(default_factory=dict)
    feasibility_pre: dict = field(default_factory=dict)
    feasibility_post: dict = field(default_factory=dict)
    thresholds_pre: dict = field(default_factory=dict)
    thresholds_post: dict = field(default_factory=dict)
    optimality_pre: float | None = None
    optimality_post: float | None = None
    pf_convergence: float | None = None
    n_converged: int = 0
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> EvalReport:
        return EvalReport(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> EvalReport:
        return EvalReport.from_dict(json.loads(text))


def evaluate(model_or_solutions: Predictor | Sequence[OpfSolution], dataset: Sequence[Example],
             with_pf: bool = True, pf_options: PfOptions | None = None) -> EvalReport:
    """Audit predictions on ``dataset`` before and, optionally, after power flow.

    ``model_or_solutions`` is either a callable ``grid -> OpfSolution``
    (timed per example) or a precomputed list of solutions (untimed).
    Post-PF quantities cover only examples whose power flow converged.
    """
    examples = list(dataset)
    for i, ex in enumerate(examples):
        if ex.solution is None:
            raise ValueError(f"example {i} has no reference solution")
    given = not callable(model_or_solutions)
    if given and len(model_or_solutions) != len(examples):
        raise ValueError("number of solutions does not match dataset")

    pre_t, post_t = [], []
    preds, pre_reports, pre_vals, ref_vals, ratios = [], [], [], [], []
    for i, ex in enumerate(examples):
        t0 = time.perf_counter()
        sol = model_or_solutions[i] if given else model_or_solutions(ex.grid)
        if not given:
            pre_t.append(time.perf_counter() - t0)
        sol.check_shape(ex.grid)
        preds.append(sol)
        pre_reports.append(violation_degrees(ex.grid, sol).subset(PRE_PF_FAMILIES))
        pre_vals.append(supervised_values(ex.grid, sol))
        ref_vals.append(supervised_values(ex.grid, ex.solution))
        ratios.append(optimality_ratio(objective_cost(ex.grid, sol), objective_cost(ex.grid, ex.solution)))

    rep = EvalReport(n_examples=len(examples))
    rep.trmae_pre, rep.mse_pre = _error_tables(pre_vals, ref_vals)
    pooled = ViolationReport.pooled(pre_reports) if pre_reports else ViolationReport({})
    rep.feasibility_pre = _summary(pooled)
    rep.thresholds_pre = _thresholds(pooled)
    rep.optimality_pre = float(np.mean(ratios)) if ratios else None
    rep.timing["pre_pf"] = _stat(pre_t)

    if with_pf:
        post_reports, post_vals, post_refs, post_ratios = [], [], [], []
        for i, (ex, sol) in enumerate(zip(examples, preds)):
            start = sol.copy()
            for k in ("qg", "qf", "qt", "pf", "pt"):
                v = getattr(start, k)
                v[~np.isfinite(v)] = 0.0
            t0 = time.perf_counter()
            res = restore(ex.grid, start, pf_options)
            dt = time.perf_counter() - t0
            if not res.converged:
                continue
            if pre_t:
                post_t.append(pre_t[i] + dt)
            post_reports.append(post_pf_degrees(ex.grid, res.solution))
            post_vals.append(supervised_values(ex.grid, res.solution))
            post_refs.append(ref_vals[i])
            post_ratios.append(optimality_ratio(objective_cost(ex.grid, res.solution),
                                                objective_cost(ex.grid, ex.solution)))
        rep.n_converged = len(post_reports)
        rep.pf_convergence = 100.0 * rep.n_converged / len(examples) if examples else None
        rep.trmae_post, rep.mse_post = _error_tables(post_vals, post_refs)
        pooled = ViolationReport.pooled(post_reports) if post_reports else ViolationReport(
            {k: np.zeros(0) for k in POST_PF_FAMILIES})
        rep.feasibility_post = _summary(pooled)
        rep.thresholds_post = _thresholds(pooled)
        rep.optimality_post = float(np.mean(post_ratios)) if post_ratios else None
        rep.timing["post_pf"] = _stat(post_t)
    return rep


def model_predictor(params: dict, stats) -> Predictor:
    """Wrap trained parameters as a ``grid -> OpfSolution`` callable."""
    from ..gnn import forward
    from ..graph import to_typed_graph

    def predict(grid: Grid) -> OpfSolution:
        return forward(params, to_typed_graph(grid, stats), grid)

    return predict


# ---------------------------------------------------------------------------
# Plain-text tables
# ---------------------------------------------------------------------------

FAMILY_LABELS = {
    "thermal_from": "Branch thermal limit from",
    "thermal_to": "Branch thermal limit to",
    "angle_diff": "Branch voltage angle difference",
    "q_balance": "Reactive power balance bus",
    "p_balance": "Real power balance bus",
    "vm_bounds_pq": "Bus voltage bounds pq",
    "vm_bounds_pv": "Bus voltage bounds pv",
    "qg_bounds_slack": "Generator reactive power bounds slack",
    "pg_bounds_slack": "Generator real power bounds slack",
}
GROUP_LABELS = {"bus": "Bus", "gen": "Gen", "line": "Line", "transformer": "Trasf."}


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cols = [list(header)] + [list(r) for r in rows]
    widths = [max(len(str(r[j])) for r in cols) for j in range(len(header))]
    lines = []
    for n, r in enumerate(cols):
        cells = [str(c).ljust(w) if j == 0 else str(c).rjust(w) for j, (c, w) in enumerate(zip(r, widths))]
        lines.append("  ".join(cells))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _pct(x):
    return "-" if x is None else f"{100 * x:.1f}%"


def _sci(x):
    return "-" if x is None else f"{x:.2e}"


def report_tables(reports: dict[str, EvalReport]) -> str:
    """Aligned text tables, one column per named report."""
    names = list(reports)
    out = []

    def sup_table(title, attr, fmt):
        rows = []
        for group, fld in SUPERVISED_ROWS:
            k = row_key(group, fld)
            rows.append([f"{GROUP_LABELS[group]} {fld}"] + [fmt(getattr(reports[n], attr).get(k)) for n in names])
        out.append(title + "\n" + format_table([""] + names, rows))

    def feas_table(title, attr, families):
        rows = [[FAMILY_LABELS[f]] + [_sci((getattr(reports[n], attr).get(f) or {}).get("mean")) for n in names]
                for f in families]
        out.append(title + "\n" + format_table([""] + names, rows))

    sup_table("Pre-power flow TRMAE", "trmae_pre", _pct)
    sup_table("Pre-power flow MSE", "mse_pre", _sci)
    feas_table("Pre-power flow feasibility (mean violation degree)", "feasibility_pre", PRE_PF_FAMILIES)
    if any(reports[n].pf_convergence is not None for n in names):
        conv = [["PF convergence"] + ["-" if reports[n].pf_convergence is None
                                      else f"{reports[n].pf_convergence:.1f}%" for n in names]]
        out.append("Power flow convergence\n" + format_table([""] + names, conv))
        sup_table("Post-power flow TRMAE", "trmae_post", _pct)
        feas_table("Post-power flow feasibility (mean violation degree)", "feasibility_post", POST_PF_FAMILIES)
    opt = [["pre-PF"] + ["-" if reports[n].optimality_pre is None else f"{reports[n].optimality_pre:.2f}%"
                         for n in names],
           ["post-PF"] + ["-" if reports[n].optimality_post is None else f"{reports[n].optimality_post:.2f}%"
                          for n in names]]
    out.append("Optimality ratio\n" + format_table([""] + names, opt))
    return "\n\n".join(out) + "\n"
