"""Model-size sweep over the number of message passing steps."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from ..gnn import ModelConfig, TrainConfig, train

log = logging.getLogger(__name__)


def sweep(steps_grid, dataset: dict, train_cfg: TrainConfig, model_cfg: ModelConfig,
          seeds=(0, 1)) -> dict:
    """Train every ``(steps, seed)`` cell and collect validation curves.

    Returns ``{steps: {"runs": [...], "final_con_mean", "final_con_spread",
    ...}}``.  A failing cell is recorded with its error and the sweep goes on.
    """
    if not steps_grid:
        raise ValueError("empty sweep grid")
    out = {}
    for s in steps_grid:
        runs = []
        for seed in seeds:
            cfg = replace(model_cfg, num_message_passing_steps=int(s))
            try:
                res = train(replace(train_cfg, seed=int(seed)), cfg, dataset)
            except Exception as e:  # noqa: BLE001 - keep the sweep going
                log.warning("sweep cell steps=%s seed=%s failed: %s", s, seed, e)
                runs.append({"seed": int(seed), "error": f"{type(e).__name__}: {e}"})
                continue
            runs.append({"seed": int(seed), "curve": res.validation,
                         "final": res.validation[-1] if res.validation else {}})
        cell = {"runs": runs}
        for key in ("loss_con", "loss_sup", "loss_total", "trmae_va", "trmae_pg"):
            vals = [r["final"].get(key) for r in runs if "final" in r]
            vals = [v for v in vals if v is not None]
            cell[f"final_{key}_mean"] = float(np.mean(vals)) if vals else None
            cell[f"final_{key}_spread"] = float(np.ptp(vals)) if vals else None
        out[int(s)] = cell
    return out


def improving_pairs(result: dict, key: str = "final_loss_con_mean") -> int:
    """Adjacent size pairs (sorted by steps) whose ``key`` does not get worse."""
    sizes = sorted(result)
    vals = [result[s][key] for s in sizes]
    return sum(1 for a, b in zip(vals, vals[1:]) if a is not None and b is not None and b <= a)
