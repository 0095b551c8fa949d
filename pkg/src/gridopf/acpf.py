"""Newton-Raphson AC power flow with generator reactive-limit enforcement.

Used as the feasibility-restoration step: non-slack real power is held at
its pre-power-flow value, PV set points are kept, and the REF bus absorbs
the network losses.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .constraints import ViolationReport, branch_flows, violation_degrees
from .grid import Grid, NetworkArrays, OpfSolution, compile_network

log = logging.getLogger(__name__)


def build_ybus(grid_or_net: Grid | NetworkArrays) -> sp.csr_matrix:
    net = grid_or_net if isinstance(grid_or_net, NetworkArrays) else compile_network(grid_or_net)
    nb = net.n_bus
    y = net.g + 1j * net.b
    T = net.tap * np.exp(1j * net.shift)
    yff = (y + 1j * net.b_fr) / (net.tap ** 2)
    yft = -y / np.conj(T)
    ytf = -y / T
    ytt = y + 1j * net.b_to
    rows = np.concatenate([net.f, net.f, net.t, net.t, np.arange(nb)])
    cols = np.concatenate([net.f, net.t, net.f, net.t, np.arange(nb)])
    vals = np.concatenate([yff, yft, ytf, ytt, net.gs_bus + 1j * net.bs_bus])
    return sp.csr_matrix((vals, (rows, cols)), shape=(nb, nb))


@dataclass
class PfOptions:
    tol: float = 1e-8
    max_iter: int = 30
    max_outer: int = 10
    enforce_q_lims: bool = True


@dataclass
class PfResult:
    converged: bool
    iterations: int
    outer_iterations: int
    solution: OpfSolution
    limited_buses: list[int] = field(default_factory=list)
    max_inner_iterations: int = 0
    max_mismatch: float = np.inf
    message: str = ""
    violations: ViolationReport | None = None


def _jacobian(Y, V, pvpq, pq):
    ibus = Y @ V
    vnorm = V / np.abs(V)
    dV = sp.diags(V)
    ds_dvm = dV @ np.conj(Y @ sp.diags(vnorm)) + np.conj(sp.diags(ibus)) @ sp.diags(vnorm)
    ds_dva = 1j * dV @ np.conj(sp.diags(ibus) - Y @ dV)
    ds_dvm = sp.csr_matrix(ds_dvm)
    ds_dva = sp.csr_matrix(ds_dva)
    j11 = ds_dva[pvpq][:, pvpq].real
    j12 = ds_dvm[pvpq][:, pq].real
    j21 = ds_dva[pq][:, pvpq].imag
    j22 = ds_dvm[pq][:, pq].imag
    return sp.bmat([[j11, j12], [j21, j22]], format="csc")


def newton_raphson(Y, sbus, V0, pv, pq, tol, max_iter):
    """Plain NR in polar coordinates. Returns ``(V, converged, iterations, max_mismatch)``."""
    V = V0.astype(np.complex128).copy()
    va, vm = np.angle(V), np.abs(V)
    pvpq = np.concatenate([pv, pq])
    npvpq = len(pvpq)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - sbus
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    F = mismatch(V)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        J = _jacobian(Y, V, pvpq, pq)
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                dx = -spsolve(J, F)
            except (MatrixRankWarning, RuntimeError):
                return V, False, it, norm
        if not np.all(np.isfinite(dx)):
            return V, False, it, norm
        it += 1
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        V = vm * np.exp(1j * va)
        F = mismatch(V)
        norm = np.max(np.abs(F)) if F.size else 0.0
        if not np.isfinite(norm):
            return V, False, it, norm
    return V, norm <= tol, it, norm


def _share(total, lo, hi, idx):
    """Split a bus total among its generators in proportion to their range."""
    lo_i, hi_i = lo[idx], hi[idx]
    width = hi_i - lo_i
    span = width.sum()
    if len(idx) == 1:
        return np.array([total])
    if np.isfinite(span) and span > 0:
        return lo_i + (total - lo_i.sum()) * width / span
    return np.full(len(idx), total / len(idx))


def solve_pf(grid: Grid, init: OpfSolution | None = None, opts: PfOptions | None = None) -> PfResult:
    opts = opts or PfOptions()
    net = compile_network(grid)
    nb = net.n_bus
    Y = build_ybus(net)

    if init is None:
        pg = np.array([g.pg for g in grid.generators], dtype=np.float64)
        qg = np.array([g.qg for g in grid.generators], dtype=np.float64)
        vm = np.ones(nb)
        va = np.zeros(nb)
        for g, b in zip(grid.generators, net.gen_bus):
            vm[b] = g.vg
    else:
        init.check_shape(grid)
        pg = init.pg.copy()
        qg = np.nan_to_num(init.qg.copy())
        vm = init.vm.copy()
        va = np.where(np.isfinite(init.va), init.va, 0.0)

    gens_at = [np.flatnonzero(net.gen_bus == i) for i in range(nb)]
    is_pv = ~net.ref_mask & np.array([len(g) > 0 for g in gens_at])
    q_fixed = {}  # bus -> fixed total generator Q after limiting
    limited: list[int] = []

    V = vm * np.exp(1j * va)
    total_it = 0
    max_inner = 0
    outer = 0
    converged = False
    norm = np.inf
    message = ""
    while True:
        pv = np.flatnonzero(is_pv)
        pq = np.flatnonzero(~is_pv & ~net.ref_mask)
        qg_bus = np.zeros(nb)
        for b, qv in q_fixed.items():
            qg_bus[b] = qv
        sbus = (np.bincount(net.gen_bus, weights=pg, minlength=nb) - net.pd_bus
                + 1j * (qg_bus - net.qd_bus))
        V, ok, it, norm = newton_raphson(Y, sbus, V, pv, pq, opts.tol, opts.max_iter)
        total_it += it
        max_inner = max(max_inner, it)
        if not ok:
            message = "singular Jacobian" if it < opts.max_iter and np.isfinite(norm) else "no convergence"
            break
        s_calc = V * np.conj(Y @ V)
        qgen_bus = s_calc.imag + net.qd_bus
        if not opts.enforce_q_lims:
            converged = True
            break
        newly = []
        for b in pv:
            idx = gens_at[b]
            qlo, qhi = net.qmin[idx].sum(), net.qmax[idx].sum()
            if qgen_bus[b] > qhi:
                q_fixed[b] = qhi
                newly.append(b)
            elif qgen_bus[b] < qlo:
                q_fixed[b] = qlo
                newly.append(b)
        if not newly:
            converged = True
            break
        for b in newly:
            is_pv[b] = False
            limited.append(grid.buses[b].id)
        outer += 1
        if outer >= opts.max_outer:
            message = "reactive limits still violated after max_outer"
            break

    va_out, vm_out = np.angle(V), np.abs(V)
    s_calc = V * np.conj(Y @ V)
    pgen_bus = s_calc.real + net.pd_bus
    qgen_bus = s_calc.imag + net.qd_bus
    pg_out = pg.copy()
    qg_out = qg.copy()
    for b in range(nb):
        idx = gens_at[b]
        if not len(idx):
            continue
        if net.ref_mask[b]:
            dp = pgen_bus[b] - pg[idx].sum()
            w = net.pmax[idx] - net.pmin[idx]
            w = w / w.sum() if np.isfinite(w.sum()) and w.sum() > 0 else np.full(len(idx), 1 / len(idx))
            pg_out[idx] = pg[idx] + dp * w
        qtot = q_fixed.get(b, qgen_bus[b])
        qg_out[idx] = _share(qtot, net.qmin, net.qmax, idx)
        if not net.ref_mask[b] and opts.enforce_q_lims and converged:
            qg_out[idx] = np.clip(qg_out[idx], net.qmin[idx], net.qmax[idx])
    pf, qf, pt, qt = branch_flows(net, va_out, vm_out)
    sol = OpfSolution(va=va_out, vm=vm_out, pg=pg_out, qg=qg_out, pf=pf, qf=qf, pt=pt, qt=qt)
    if not converged:
        log.debug("power flow failed: %s (mismatch %.3e)", message, norm)
    return PfResult(converged=converged, iterations=total_it, outer_iterations=outer,
                    solution=sol, limited_buses=limited, max_inner_iterations=max_inner,
                    max_mismatch=float(norm), message=message)


def restore(grid: Grid, approx: OpfSolution, opts: PfOptions | None = None) -> PfResult:
    """Run power flow warm-started from an approximate OPF solution."""
    res = solve_pf(grid, approx, opts)
    if res.converged:
        res.violations = violation_degrees(grid, res.solution)
    return res
