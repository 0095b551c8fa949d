"""DC-OPF (B-theta model) solved by a primal-dual interior-point method."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..acpf import PfOptions, restore
from ..grid import Grid, NetworkArrays, OpfSolution, compile_network


class DcOpfError(RuntimeError):
    def __init__(self, msg, max_violation=None):
        super().__init__(msg)
        self.max_violation = max_violation


@dataclass
class QuadProgram:
    """min 1/2 x'Hx + c'x  s.t.  Ax = b,  Gx <= h."""

    H: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    labels: list[str] = field(default_factory=list)  # one per row of G


def kkt_residuals(qp: QuadProgram, x, y, z) -> dict[str, float]:
    slack = qp.h - qp.G @ x
    return {
        "stationarity": float(np.max(np.abs(qp.H @ x + qp.c + qp.A.T @ y + qp.G.T @ z), initial=0.0)),
        "primal_eq": float(np.max(np.abs(qp.A @ x - qp.b), initial=0.0)),
        "primal_ineq": float(np.max(np.maximum(-slack, 0.0), initial=0.0)),
        "dual": float(np.max(np.maximum(-z, 0.0), initial=0.0)),
        "complementarity": float(np.max(np.abs(z * slack), initial=0.0)),
    }


def solve_qp(qp: QuadProgram, tol: float = 1e-10, max_iter: int = 100):
    """Mehrotra predictor-corrector on the dense KKT system.

    Returns ``(x, y, z, iterations)``; raises :class:`DcOpfError` if the
    residuals do not reach ``tol``.
    """
    n, m, p = len(qp.c), len(qp.b), len(qp.h)
    H, c, A, b, G, h = qp.H, qp.c, qp.A, qp.b, qp.G, qp.h
    x = np.zeros(n)
    y = np.zeros(m)
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(p)
    scale = 1.0 + max(np.max(np.abs(c), initial=0), np.max(np.abs(b), initial=0),
                      np.max(np.abs(h), initial=0))

    def solve_newton(rd, rp, ri, rc):
        w_inv = z / s
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H + G.T @ (w_inv[:, None] * G)
        K[:n, n:] = A.T
        K[n:, :n] = A
        rhs = np.concatenate([-rd - G.T @ (w_inv * (ri - rc / z)), -rp])
        sol = np.linalg.solve(K, rhs)
        dx, dy = sol[:n], sol[n:]
        dz = w_inv * (G @ dx + ri - rc / z)
        ds = -(rc + s * dz) / z
        return dx, dy, dz, ds

    def max_step(v, dv):
        neg = dv < 0
        return min(1.0, np.min(-v[neg] / dv[neg])) if np.any(neg) else 1.0

    for it in range(1, max_iter + 1):
        rd = H @ x + c + A.T @ y + G.T @ z
        rp = A @ x - b
        ri = G @ x + s - h
        mu = s.dot(z) / p if p else 0.0
        res = max(np.max(np.abs(rd), initial=0), np.max(np.abs(rp), initial=0),
                  np.max(np.abs(ri), initial=0))
        if res <= tol * scale and mu <= tol:
            return x, y, z, it
        try:
            dx, dy, dz, ds = solve_newton(rd, rp, ri, s * z)
            a_aff = min(max_step(s, ds), max_step(z, dz))
            mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / p if p else 0.0
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            rc = s * z + ds * dz - sigma * mu
            dx, dy, dz, ds = solve_newton(rd, rp, ri, rc)
        except np.linalg.LinAlgError as e:
            raise DcOpfError(f"singular KKT system: {e}") from None
        alpha = 0.99 * min(max_step(s, ds), max_step(z, dz))
        alpha = min(alpha, 1.0)
        x += alpha * dx
        y += alpha * dy
        z += alpha * dz
        s += alpha * ds
    viol = max(np.max(np.abs(A @ x - b), initial=0), np.max(np.maximum(G @ x - h, 0), initial=0))
    raise DcOpfError(f"DC-OPF did not converge (max violation {viol:.3e}); problem may be infeasible",
                     max_violation=float(viol))


@dataclass
class DcSolution:
    pg: np.ndarray
    va: np.ndarray
    vm: np.ndarray
    pf: np.ndarray                    # DC branch flow, from end (pt = -pf)
    lmp: np.ndarray                   # multipliers of nodal balance
    kkt: dict[str, float]
    qp: QuadProgram | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    z: np.ndarray | None = None

    def balance_residual(self, grid: Grid) -> float:
        net = compile_network(grid)
        inj = np.bincount(net.gen_bus, weights=self.pg, minlength=net.n_bus) - net.pd_bus - net.gs_bus
        out = np.bincount(net.f, weights=self.pf, minlength=net.n_bus) - np.bincount(
            net.t, weights=self.pf, minlength=net.n_bus)
        return float(np.max(np.abs(inj - out)))

    def to_opf_solution(self) -> OpfSolution:
        """Partial AC solution: reactive quantities are NaN."""
        nan_g = np.full(len(self.pg), np.nan)
        nan_l = np.full(len(self.pf), np.nan)
        return OpfSolution(va=self.va, vm=self.vm, pg=self.pg, qg=nan_g,
                           pf=self.pf, qf=nan_l, pt=-self.pf, qt=nan_l.copy())


def dc_susceptance(net: NetworkArrays) -> np.ndarray:
    """``1 / (x * tap)`` with ``x`` recovered from ``g + jb = 1 / (r + jx)``."""
    x = -net.b / (net.g ** 2 + net.b ** 2)
    return 1.0 / (x * net.tap)


def build_dc_qp(grid: Grid) -> tuple[QuadProgram, NetworkArrays]:
    net = compile_network(grid)
    nb, ng, nl = net.n_bus, net.n_gen, net.n_branch
    if np.any(net.c2 < 0):
        raise DcOpfError("DC-OPF requires convex costs (c2 >= 0)")
    bsus = dc_susceptance(net)
    n = ng + nb
    H = np.zeros((n, n))
    H[np.arange(ng), np.arange(ng)] = 2.0 * net.c2
    c = np.concatenate([net.c1, np.zeros(nb)])

    # branch flow p = bsus * (theta_f - theta_t - shift) expressed as row @ x + const
    Cft = np.zeros((nl, nb))
    Cft[np.arange(nl), net.f] = 1.0
    Cft[np.arange(nl), net.t] -= 1.0
    flow_rows = bsus[:, None] * Cft
    flow_const = -bsus * net.shift

    Cg = np.zeros((nb, ng))
    Cg[net.gen_bus, np.arange(ng)] = 1.0
    Bbus = Cft.T @ flow_rows
    shift_inj = Cft.T @ flow_const
    A_bal = np.hstack([Cg, -Bbus])
    b_bal = net.pd_bus + net.gs_bus + shift_inj
    ref = np.flatnonzero(net.ref_mask)
    A_ref = np.zeros((len(ref), n))
    A_ref[np.arange(len(ref)), ng + ref] = 1.0
    fixed = np.flatnonzero(net.pmin == net.pmax)
    A_fix = np.zeros((len(fixed), n))
    A_fix[np.arange(len(fixed)), fixed] = 1.0
    A = np.vstack([A_bal, A_ref, A_fix])
    b = np.concatenate([b_bal, np.zeros(len(ref)), net.pmin[fixed]])

    G_rows, h_rows, labels = [], [], []

    def add(row, rhs, label):
        G_rows.append(row)
        h_rows.append(rhs)
        labels.append(label)

    for k in range(ng):
        if net.pmin[k] == net.pmax[k]:
            continue
        e = np.zeros(n)
        e[k] = 1.0
        if np.isfinite(net.pmax[k]):
            add(e, net.pmax[k], f"pmax:{k}")
        if np.isfinite(net.pmin[k]):
            add(-e, -net.pmin[k], f"pmin:{k}")
    for l in range(nl):
        row = np.concatenate([np.zeros(ng), flow_rows[l]])
        if np.isfinite(net.rate[l]):
            add(row, net.rate[l] - flow_const[l], f"flow_hi:{l}")
            add(-row, net.rate[l] + flow_const[l], f"flow_lo:{l}")
        drow = np.concatenate([np.zeros(ng), Cft[l]])
        if net.angmax[l] < 2 * np.pi:
            add(drow, net.angmax[l], f"ang_hi:{l}")
        if net.angmin[l] > -2 * np.pi:
            add(-drow, -net.angmin[l], f"ang_lo:{l}")
    G = np.array(G_rows) if G_rows else np.zeros((0, n))
    h = np.array(h_rows) if h_rows else np.zeros(0)
    return QuadProgram(H, c, A, b, G, h, labels), net


def solve_dcopf(grid: Grid, tol: float = 1e-10) -> DcSolution:
    qp, net = build_dc_qp(grid)
    x, y, z, _ = solve_qp(qp, tol=tol)
    ng = net.n_gen
    pg, va = x[:ng].copy(), x[ng:].copy()
    bsus = dc_susceptance(net)
    pf = bsus * (va[net.f] - va[net.t] - net.shift)
    return DcSolution(pg=pg, va=va, vm=np.ones(net.n_bus), pf=pf, lmp=y[:net.n_bus].copy(),
                      kkt=kkt_residuals(qp, x, y, z), qp=qp, x=x, y=y, z=z)


class PowerFlowError(RuntimeError):
    pass


def dc_warm_start(dc: DcSolution) -> OpfSolution:
    ng, nl = len(dc.pg), len(dc.pf)
    return OpfSolution(va=dc.va, vm=np.ones(len(dc.va)), pg=dc.pg, qg=np.zeros(ng),
                       pf=dc.pf, qf=np.zeros(nl), pt=-dc.pf, qt=np.zeros(nl))


def complete_dc_solution(grid: Grid, dc: DcSolution, opts: PfOptions | None = None) -> OpfSolution:
    """Expand a DC dispatch into a full AC solution by running power flow."""
    res = restore(grid, dc_warm_start(dc), opts)
    if not res.converged:
        raise PowerFlowError(f"power flow from DC solution failed: {res.message}")
    return res.solution
