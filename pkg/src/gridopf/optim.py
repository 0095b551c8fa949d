"""First-order optimizers shared by the GNN trainer and the penalty AC-OPF solver."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(0, {k: np.zeros_like(v) for k, v in params.items()},
                     {k: np.zeros_like(v) for k, v in params.items()})


def adam_update(params, grads, state: AdamState, lr: float,
                b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns new params, mutates ``state``."""
    state.step += 1
    t = state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        out[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    evaluations: int


def lbfgs(fun, x0: np.ndarray, max_iter: int = 500, memory: int = 20,
          gtol: float = 1e-9, ftol: float = 1e-15, max_halvings: int = 60,
          init_step: float = 1.0) -> MinimizeResult:
    """Limited-memory BFGS with step halving until the objective decreases.

    ``fun(x) -> (f, g)``.  Stops on a small gradient, a stalled objective or
    when no halving yields descent.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    n_eval = 1
    hist: deque = deque(maxlen=memory)
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = np.max(np.abs(g))
        if gnorm <= gtol:
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(hist):
            a = rho * s.dot(q)
            alphas.append(a)
            q -= a * y
        if hist:
            s, y, _ = hist[-1]
            q *= s.dot(y) / y.dot(y)
        else:
            q *= init_step / max(gnorm, 1.0)
        for (s, y, rho), a in zip(hist, reversed(alphas)):
            b = rho * y.dot(q)
            q += s * (a - b)
        d = -q
        slope = g.dot(d)
        if slope >= 0:
            hist.clear()
            d = -g * init_step / max(gnorm, 1.0)
            slope = g.dot(d)
        step = 1.0
        for _ in range(max_halvings):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            n_eval += 1
            if np.isfinite(f_new) and f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            break
        s_vec = x_new - x
        y_vec = g_new - g
        sy = s_vec.dot(y_vec)
        converged = abs(f - f_new) <= ftol * max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        if sy > 1e-12 * np.sqrt(s_vec.dot(s_vec) * y_vec.dot(y_vec)):
            hist.append((s_vec, y_vec, 1.0 / sy))
        if converged:
            break
    return MinimizeResult(x=x, fun=float(f), grad_norm=float(np.max(np.abs(g))),
                          iterations=it, evaluations=n_eval)
