"""Quadratic-penalty AC-OPF solver used to produce reference labels.

Bounds on vm, pg and qg hold by construction and branch flows are derived
from voltages, so only balance, thermal and angle-difference constraints
enter the penalty.  Two parameterizations are available: physical variables
kept in their boxes by a projected Newton method (default), or the sigmoid
mapping used by the GNN decoder, minimized with L-BFGS.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .. import autodiff as ad
from ..acpf import build_ybus, restore
from ..constraints import (ViolationReport, branch_flows, cost, finite_box, logit_bound,
                           sigmoid_bound, violable_degrees, violation_degrees)
from ..grid import Grid, NetworkArrays, OpfSolution, compile_network
from ..optim import MinimizeResult, lbfgs
from .dcopf import DcOpfError, dc_warm_start, solve_dcopf

log = logging.getLogger(__name__)


def geometric_schedule(start: float = 10.0, stop: float = 1e5, factor: float = 10.0) -> tuple[float, ...]:
    n = int(round(np.log(stop / start) / np.log(factor))) + 1
    return tuple(float(start * factor ** i) for i in range(n))


@dataclass
class PenaltyConfig:
    rho_schedule: tuple[float, ...] = field(default_factory=geometric_schedule)
    inner_steps: int = 60
    step_size: float = 1.0          # first trial step of each line search
    tol: float = 1e-5               # on the max balance degree (p.u.)
    seed: int = 0
    init_noise: float = 0.02        # start perturbation, fraction of each box width
    warm_start: str = "dc"          # "dc" or "flat"
    parameterization: str = "box"   # "box" (projected Newton) or "sigmoid" (L-BFGS)
    marginal_cost: float = 1e-2     # typical marginal cost after objective scaling

    def __post_init__(self):
        r = np.asarray(self.rho_schedule, dtype=float)
        if r.size == 0 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise ValueError("rho_schedule must be positive and strictly increasing")
        if self.parameterization not in ("box", "sigmoid"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.warm_start not in ("dc", "flat"):
            raise ValueError(f"unknown warm start {self.warm_start!r}")


@dataclass
class PenaltyResult:
    solution: OpfSolution
    report: ViolationReport
    converged: bool
    cost: float
    max_balance: float
    stages: int
    evaluations: int
    seconds: float

    def __iter__(self):
        # unpacks as (solution, report)
        return iter((self.solution, self.report))


class PenaltyProblem:
    """Penalized objective over ``z = [va, vm, pg, qg]`` (physical units)."""

    def __init__(self, net: NetworkArrays, marginal_cost: float = 1e-2):
        self.net = net
        nb, ng, nl = net.n_bus, net.n_gen, net.n_branch
        self.sizes = {"va": nb, "vm": nb, "pg": ng, "qg": ng}
        self.free_va = (~net.ref_mask).astype(np.float64)
        self.vbox = finite_box(net.vmin, net.vmax)
        self.pbox = finite_box(net.pmin, net.pmax)
        self.qbox = finite_box(net.qmin, net.qmax)
        va_lo = np.where(net.ref_mask, 0.0, -np.inf)
        va_hi = np.where(net.ref_mask, 0.0, np.inf)
        self.lo = np.concatenate([va_lo, self.vbox[0], self.pbox[0], self.qbox[0]])
        self.hi = np.concatenate([va_hi, self.vbox[1], self.pbox[1], self.qbox[1]])

        mid = 0.5 * (self.pbox[0] + self.pbox[1])
        marginal = np.abs(net.c1 + 2 * net.c2 * mid)
        scale = float(np.median(marginal)) if marginal.size else 0.0
        # cost is rescaled so a typical marginal cost equals ``marginal_cost``
        self.cost_scale = (scale if scale > 0 else 1.0) / marginal_cost

        self.Ybus = build_ybus(net).toarray()
        self.Cg = np.zeros((nb, ng))
        self.Cg[net.gen_bus, np.arange(ng)] = 1.0
        self.Cf = np.zeros((nl, nb))
        self.Cf[np.arange(nl), net.f] = 1.0
        self.Ct = np.zeros((nl, nb))
        self.Ct[np.arange(nl), net.t] = 1.0
        y = net.g + 1j * net.b
        T = net.tap * np.exp(1j * net.shift)
        self.Yf = (((y + 1j * net.b_fr) / net.tap ** 2)[:, None] * self.Cf
                   - (y / np.conj(T))[:, None] * self.Ct)
        self.Yt = (-(y / T))[:, None] * self.Cf + (y + 1j * net.b_to)[:, None] * self.Ct

    # -- packing -------------------------------------------------------------

    def split(self, z):
        out, i = {}, 0
        for k, n in self.sizes.items():
            out[k] = z[i:i + n]
            i += n
        return out

    def pack(self, va, vm, pg, qg) -> np.ndarray:
        return np.concatenate([va, vm, pg, qg]).astype(np.float64)

    def solution(self, z) -> OpfSolution:
        p = self.split(np.clip(z, self.lo, self.hi))
        pf, qf, pt, qt = branch_flows(self.net, p["va"], p["vm"])
        return OpfSolution(va=p["va"].copy(), vm=p["vm"].copy(), pg=p["pg"].copy(),
                           qg=p["qg"].copy(), pf=pf, qf=qf, pt=pt, qt=qt)

    # -- sigmoid parameterization (autodiff) ---------------------------------

    def decode_raw(self, raw):
        va = raw["va"] * self.free_va
        vm = sigmoid_bound(raw["vm"], *self.vbox)
        pg = sigmoid_bound(raw["pg"], *self.pbox)
        qg = sigmoid_bound(raw["qg"], *self.qbox)
        return va, vm, pg, qg

    def encode_raw(self, z) -> np.ndarray:
        p = self.split(z)
        return np.concatenate([p["va"] * self.free_va, logit_bound(p["vm"], *self.vbox),
                               logit_bound(p["pg"], *self.pbox), logit_bound(p["qg"], *self.qbox)])

    def raw_to_physical(self, x) -> np.ndarray:
        return self.pack(*self.decode_raw(self.split(x)))

    def objective_raw(self, params, rho):
        """Penalized objective of the raw (pre-sigmoid) vector, on the autodiff tape."""
        va, vm, pg, qg = self.decode_raw(self.split(params["x"]))
        flows = branch_flows(self.net, va, vm)
        deg = violable_degrees(self.net, va, vm, pg, qg, *flows)
        pen = 0.0
        for d in deg.values():
            pen = pen + ad.sum(ad.square(d))
        return cost(self.net, pg) / self.cost_scale + rho * pen

    # -- physical parameterization (analytic derivatives) --------------------

    def residuals(self, z, jac: bool = True):
        """Signed penalty residuals; with ``jac`` also their Jacobian and ``V``."""
        net = self.net
        p = self.split(z)
        va, vm, pg, qg = p["va"], p["vm"], p["pg"], p["qg"]
        V = vm * np.exp(1j * va)
        s_inj = V * np.conj(self.Ybus @ V)
        p_mis = self.Cg @ pg - net.pd_bus - s_inj.real
        q_mis = self.Cg @ qg - net.qd_bus - s_inj.imag
        i_f = self.Yf @ V
        i_t = self.Yt @ V
        s_f = V[net.f] * np.conj(i_f)
        s_t = V[net.t] * np.conj(i_t)
        mag_f, mag_t = np.abs(s_f), np.abs(s_t)
        th_f = np.maximum(mag_f - net.rate, 0.0)
        th_t = np.maximum(mag_t - net.rate, 0.0)
        dth = va[net.f] - va[net.t]
        ang = np.maximum(net.angmin - dth, 0.0) + np.maximum(dth - net.angmax, 0.0)
        r = np.concatenate([p_mis, q_mis, th_f, th_t, ang])
        if not jac:
            return r, pg

        nb, ng = net.n_bus, net.n_gen
        dS_dva, dS_dvm = _ds_dv(self.Ybus, V)
        zg = np.zeros((nb, ng))
        j_p = np.hstack([-dS_dva.real, -dS_dvm.real, self.Cg, zg])
        j_q = np.hstack([-dS_dva.imag, -dS_dvm.imag, zg, self.Cg])

        def hinge_rows(s_br, mag, active, Yb, Cb, i_br):
            d_va, d_vm = _dsbr_dv(Yb, Cb, V, i_br)
            with np.errstate(invalid="ignore", divide="ignore"):
                w_p = np.where(active, s_br.real / mag, 0.0)[:, None]
                w_q = np.where(active, s_br.imag / mag, 0.0)[:, None]
            return np.hstack([w_p * d_va.real + w_q * d_va.imag,
                              w_p * d_vm.real + w_q * d_vm.imag,
                              np.zeros((len(mag), 2 * ng))])

        j_tf = hinge_rows(s_f, mag_f, th_f > 0, self.Yf, self.Cf, i_f)
        j_tt = hinge_rows(s_t, mag_t, th_t > 0, self.Yt, self.Ct, i_t)
        ang_sign = (dth > net.angmax).astype(float) - (dth < net.angmin)
        j_ang = np.hstack([ang_sign[:, None] * (self.Cf - self.Ct), np.zeros((len(ang), nb + 2 * ng))])
        return r, pg, np.vstack([j_p, j_q, j_tf, j_tt, j_ang]), V

    def _cost_terms(self, pg):
        c2, c1 = self.net.c2, self.net.c1
        f = np.sum(c2 * pg * pg + c1 * pg) / self.cost_scale
        return f, (2 * c2 * pg + c1) / self.cost_scale, 2 * c2 / self.cost_scale

    def value(self, z, rho) -> float:
        r, pg = self.residuals(z, jac=False)
        return float(self._cost_terms(pg)[0] + rho * r.dot(r))

    def model(self, z, rho):
        """Value, gradient and Hessian of the penalized objective.

        The Hessian is exact except for the second derivatives of the
        thermal hinge terms, which are left to their Gauss-Newton part.
        """
        nb, ng = self.net.n_bus, self.net.n_gen
        r, pg, J, V = self.residuals(z)
        f_cost, dc, d2c = self._cost_terms(pg)
        ipg = np.arange(2 * nb, 2 * nb + ng)

        g = 2 * rho * J.T @ r
        g[ipg] += dc
        H = 2 * rho * J.T @ J
        H[ipg, ipg] += d2c
        # sum_i r_i * Hess(r_i) for the balance rows (voltage block only)
        paa, pav, pvv = _d2s_dv2(self.Ybus, V, r[:nb])
        qaa, qav, qvv = _d2s_dv2(self.Ybus, V, r[nb:2 * nb])
        h_av = -(pav.real + qav.imag)
        H[:nb, :nb] -= 2 * rho * (paa.real + qaa.imag)
        H[:nb, nb:2 * nb] += 2 * rho * h_av
        H[nb:2 * nb, :nb] += 2 * rho * h_av.T
        H[nb:2 * nb, nb:2 * nb] -= 2 * rho * (pvv.real + qvv.imag)
        return float(f_cost + rho * r.dot(r)), g, H


def _ds_dv(Y, V):
    """Dense polar derivatives of ``V * conj(Y V)``."""
    i_bus = Y @ V
    vnorm = V / np.abs(V)
    ds_dvm = V[:, None] * np.conj(Y * vnorm[None, :]) + np.diag(np.conj(i_bus) * vnorm)
    ds_dva = 1j * (np.diag(V * np.conj(i_bus)) - V[:, None] * np.conj(Y * V[None, :]))
    return ds_dva, ds_dvm


def _dsbr_dv(Yb, Cb, V, i_br):
    """Derivatives of branch-end power ``V[end] * conj(Yb V)``."""
    v_end = Cb @ V
    vnorm = V / np.abs(V)
    ds_dva = 1j * (np.conj(i_br)[:, None] * Cb * V[None, :] - v_end[:, None] * np.conj(Yb * V[None, :]))
    ds_dvm = v_end[:, None] * np.conj(Yb * vnorm[None, :]) + np.conj(i_br)[:, None] * Cb * vnorm[None, :]
    return ds_dva, ds_dvm


def _d2s_dv2(Y, V, lam):
    """Second derivatives of ``lam' (V * conj(Y V))`` in polar coordinates.

    Returns the ``(aa, av, vv)`` blocks; ``va`` is the angle block.
    """
    i_bus = Y @ V
    diag_lam = np.diag(lam)
    A = np.diag(lam * V)
    B = Y * V[None, :]
    C = A @ np.conj(B)
    D = np.conj(Y).T * V[None, :]
    E = np.diag(np.conj(V)) @ (D @ diag_lam - np.diag(D @ lam))
    F = C - A @ np.diag(np.conj(i_bus))
    G = np.diag(1.0 / np.abs(V))
    gaa = E + F
    gva = 1j * G @ (E - F)
    gvv = G @ (C + C.T) @ G
    return gaa, gva.T, gvv


def projected_newton(model, value, z0, lo, hi, max_iter=60, gtol=1e-10,
                     max_halvings=40, step_size=1.0) -> MinimizeResult:
    """Bound-constrained Newton (two-metric projection) with step halving.

    Variables at a bound whose gradient pushes outward are held fixed; the
    rest take a Newton step whose Hessian is shifted until it is positive
    definite.  Steps are projected back onto the box.
    """
    z = np.clip(np.asarray(z0, dtype=np.float64), lo, hi)
    f, g, H = model(z)
    n_eval = 1
    it = 0
    shift = 0.0
    fixed = lo == hi

    def proj_grad(z, g):
        return np.max(np.abs(z - np.clip(z - g, lo, hi)), initial=0.0)

    for it in range(1, max_iter + 1):
        pgn = proj_grad(z, g)
        if pgn <= gtol:
            break
        eps = min(1e-8, pgn)
        active = fixed | ((z <= lo + eps) & (g > 0)) | ((z >= hi - eps) & (g < 0))
        free = np.flatnonzero(~active)
        d = np.zeros_like(z)
        if free.size:
            Hf = H[np.ix_(free, free)]
            diag = np.abs(np.diag(Hf)) + 1e-12 * np.max(np.abs(np.diag(Hf)), initial=1.0)
            while True:
                try:
                    cf = cho_factor(Hf + shift * np.diag(diag))
                    break
                except np.linalg.LinAlgError:
                    shift = max(10 * shift, 1e-8)
            d[free] = -cho_solve(cf, g[free])
        step = step_size
        for _ in range(max_halvings):
            z_new = np.clip(z + step * d, lo, hi)
            slope = g.dot(z_new - z)
            if slope < 0:
                f_new = value(z_new)
                n_eval += 1
                if np.isfinite(f_new) and f_new <= f + 1e-4 * slope:
                    break
            step *= 0.5
        else:
            break
        shift = shift * 0.1 if step == step_size else max(shift * 10, 1e-8)
        if shift < 1e-10:
            shift = 0.0
        z = z_new
        f, g, H = model(z)
    return MinimizeResult(x=z, fun=float(f), grad_norm=float(proj_grad(z, g)),
                          iterations=it, evaluations=n_eval)


def _initial_point(grid: Grid, prob: PenaltyProblem, config: PenaltyConfig) -> np.ndarray:
    net = prob.net
    pg = 0.5 * (prob.pbox[0] + prob.pbox[1])
    va = np.zeros(net.n_bus)
    vm = np.ones(net.n_bus)
    qg = np.zeros(net.n_gen)
    if config.warm_start == "dc":
        # DC dispatch, then a power flow for consistent voltages and reactive output
        try:
            dc = solve_dcopf(grid)
            pg, va = dc.pg, dc.va
            pf = restore(grid, dc_warm_start(dc))
            if pf.converged:
                va, vm, pg, qg = pf.solution.va, pf.solution.vm, pf.solution.pg, pf.solution.qg
        except DcOpfError as e:
            log.debug("DC warm start unavailable: %s", e)
    z = prob.pack(va, vm, pg, qg)
    if config.init_noise > 0:
        rng = np.random.default_rng(config.seed)
        width = np.where(np.isfinite(prob.hi - prob.lo), prob.hi - prob.lo, 0.0)
        z = z + config.init_noise * width * rng.standard_normal(z.shape)
    return np.clip(z, prob.lo, prob.hi)


def solve_acopf_penalty(grid: Grid, config: PenaltyConfig | None = None) -> PenaltyResult:
    """Minimize cost plus rho-weighted squared violations over the rho schedule.

    Stops after the first stage whose max balance degree is within ``tol``.
    The result unpacks as ``(solution, report)``; ``converged`` is False when
    the tolerance was never met, in which case the iterate with the lowest
    balance violation is returned.
    """
    config = config or PenaltyConfig()
    t0 = time.perf_counter()
    net = compile_network(grid)
    prob = PenaltyProblem(net, config.marginal_cost)
    z = _initial_point(grid, prob, config)
    x_raw = prob.encode_raw(z)

    best_z, best_bal = z, np.inf
    evals = 0
    stage = 0
    for stage, rho in enumerate(config.rho_schedule, start=1):
        if config.parameterization == "sigmoid":
            def fun(x, rho=rho):
                val, _, g = ad.value_and_grad(prob.objective_raw, {"x": x}, rho)
                return val, g["x"]

            res = lbfgs(fun, x_raw, max_iter=config.inner_steps, init_step=config.step_size,
                        gtol=1e-10, ftol=1e-14)
            x_raw = res.x
            z = prob.raw_to_physical(x_raw)
        else:
            res = projected_newton(lambda v, rho=rho: prob.model(v, rho),
                                   lambda v, rho=rho: prob.value(v, rho),
                                   z, prob.lo, prob.hi, max_iter=config.inner_steps,
                                   step_size=config.step_size)
            z = res.x
        evals += res.evaluations
        bal = _max_balance(net, prob.solution(z))
        if bal < best_bal:
            best_z, best_bal = z, bal
        log.debug("rho=%g f=%.8g balance=%.3e iters=%d", rho, res.fun, bal, res.iterations)
        if bal <= config.tol:
            break
    converged = best_bal <= config.tol
    sol = prob.solution(z if converged else best_z)
    report = violation_degrees(grid, sol)
    return PenaltyResult(solution=sol, report=report, converged=converged,
                         cost=float(cost(net, sol.pg)), max_balance=_max_balance(net, sol),
                         stages=stage, evaluations=evals, seconds=time.perf_counter() - t0)


def _max_balance(net: NetworkArrays, sol: OpfSolution) -> float:
    deg = violable_degrees(net, sol.va, sol.vm, sol.pg, sol.qg, sol.pf, sol.qf, sol.pt, sol.qt)
    return float(max(np.max(deg["p_balance"]), np.max(deg["q_balance"])))
