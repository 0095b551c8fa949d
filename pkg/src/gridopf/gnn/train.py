"""Adam training loop with warmup + exponential decay schedule."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..case_io import CheckpointError, load_checkpoint, save_checkpoint
from ..constraints import VIOLABLE_PRE_PF, ViolationReport, degrees_from_arrays
from ..graph import StandardizationStats
from ..metrics import trmae
from ..optim import AdamState, adam_update
from .model import (GROUPS, ModelConfig, Prepared, evaluate_loss, gradient, init_params, make_batch,
                    predict_batch, prepare)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg, checkpoint: str | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    total_steps: int = 10_000
    batch_size: int = 32
    warmup_steps: int = 10_000
    peak_lr: float = 2e-4
    decay_rate: float = 0.9
    transition_steps: int = 4_000
    final_lr: float = 5e-6
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1_000
    eval_every: int = 500

    def __post_init__(self):
        for name in ("total_steps", "batch_size", "transition_steps", "checkpoint_every", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if not 0 < self.final_lr < self.peak_lr:
            raise ValueError("need 0 < final_lr < peak_lr")
        if not 0 < self.decay_rate < 1:
            raise ValueError("decay_rate must lie in (0, 1)")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then staircase-free exponential decay."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps if cfg.warmup_steps else cfg.peak_lr
    decayed = cfg.peak_lr * cfg.decay_rate ** ((step - cfg.warmup_steps) / cfg.transition_steps)
    return max(cfg.final_lr, decayed)


def batch_positions(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Training-set indices for ``step``; a fresh seeded permutation per epoch."""
    pos = step * batch_size + np.arange(batch_size)
    epochs = pos // n
    out = np.empty(batch_size, dtype=np.int64)
    for ep in np.unique(epochs):
        perm = np.random.default_rng([seed, int(ep)]).permutation(n)
        m = epochs == ep
        out[m] = perm[pos[m] % n]
    return out


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def _prepare_split(examples, stats, prefix) -> list[Prepared]:
    out = []
    for i, ex in enumerate(examples):
        if ex.solution is None:
            raise ValueError(f"{prefix} example {i} has no label")
        out.append(prepare(ex.grid, ex.solution, stats, f"{prefix}:{i}"))
    return out


def validate(params, items: list[Prepared], C: float, stats, batch_size: int = 64) -> dict:
    """Mean losses, violation means and TRMAE per field over ``items``."""
    if not items:
        return {}
    totals = {"total": 0.0, "sup": 0.0, "con": 0.0}
    fields = [k for g in GROUPS.values() for k in g]
    reports, preds, targets = [], {k: [] for k in fields}, {k: [] for k in fields}
    for lo in range(0, len(items), batch_size):
        chunk = items[lo:lo + batch_size]
        batch = make_batch(chunk)
        parts = evaluate_loss(params, batch, C, stats)
        for k in totals:
            totals[k] += parts[k] * len(chunk)
        for it, sol in zip(chunk, predict_batch(params, batch)):
            reports.append(_audit(it, sol))
            for k in preds:
                preds[k].append(getattr(sol, k))
                targets[k].append(getattr(it.target, k))
    out = {f"loss_{k}": v / len(items) for k, v in totals.items()}
    pooled = ViolationReport.pooled(reports)
    out.update({f"viol_{k}": v for k, v in pooled.mean().items()})
    out.update({f"trmae_{k}": trmae(np.concatenate(preds[k]), np.concatenate(targets[k])) for k in preds})
    return out


def _audit(item: Prepared, sol) -> ViolationReport:
    arrays = {k: getattr(sol, k) for k in ("va", "vm", "pg", "qg", "pf", "qf", "pt", "qt")}
    return ViolationReport(degrees_from_arrays(item.net, **arrays)).subset(VIOLABLE_PRE_PF)


def _atomic_checkpoint(path: Path, params, state: AdamState, meta: dict):
    tmp = path.with_suffix(".tmp.npz")
    save_checkpoint(tmp, params, {**meta, "step": state.step,
                                  "arrays": {"adam_m": state.m, "adam_v": state.v}})
    os.replace(tmp, path)


def train(train_cfg: TrainConfig, model_cfg: ModelConfig, dataset: dict,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          params: dict | None = None, log_every: int = 1) -> TrainResult:
    """Train on ``dataset["train"]`` (labeled examples) with ``dataset["stats"]``.

    With ``out_dir`` set, writes ``metrics.jsonl``, ``validation.jsonl`` and
    ``checkpoint.npz``.  A non-finite loss aborts with :class:`TrainingError`
    and leaves the last good checkpoint in place.
    """
    stats: StandardizationStats = dataset["stats"]
    train_items = _prepare_split(dataset["train"], stats, "train")
    val_items = _prepare_split(dataset.get("val", []), stats, "val")
    if not train_items:
        raise ValueError("training split is empty")
    C = model_cfg.constraint_weight
    out = Path(out_dir) if out_dir is not None else None
    meta = {"model_config": asdict(model_cfg), "train_config": asdict(train_cfg)}

    state = AdamState()
    if resume is not None:
        params, ck = load_checkpoint(resume)
        if ck.get("model_config") != asdict(model_cfg):
            raise CheckpointError("checkpoint model config differs from requested config")
        state = AdamState(int(ck["step"]), ck["arrays"]["adam_m"], ck["arrays"]["adam_v"])
    elif params is None:
        params = init_params(model_cfg, train_cfg.seed)
    if not state.m:
        state = AdamState(0, {k: np.zeros_like(v) for k, v in params.items()},
                          {k: np.zeros_like(v) for k, v in params.items()})

    metrics_fh = val_fh = None
    ckpt = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.npz"
        # metrics rows are keyed by the step that produced them, validation
        # rows by the number of completed steps
        for name, last in (("metrics.jsonl", state.step - 1), ("validation.jsonl", state.step)):
            p = out / name
            keep = []
            if resume is not None and p.exists():
                keep = [ln for ln in p.read_text().splitlines()
                        if ln.strip() and json.loads(ln)["step"] <= last]
            p.write_text("".join(ln + "\n" for ln in keep))
        metrics_fh = open(out / "metrics.jsonl", "a", encoding="utf-8")
        val_fh = open(out / "validation.jsonl", "a", encoding="utf-8")

    result = TrainResult(params)
    t0 = time.perf_counter()

    def run_validation(step):
        if not val_items:
            return
        rec = {"step": step, **validate(params, val_items, C, stats)}
        result.validation.append(rec)
        if val_fh:
            val_fh.write(json.dumps(rec) + "\n")
            val_fh.flush()

    try:
        if state.step == 0:
            run_validation(0)
            if ckpt is not None:
                _atomic_checkpoint(ckpt, params, state, meta)
        while state.step < train_cfg.total_steps:
            step = state.step
            idx = batch_positions(step, len(train_items), train_cfg.batch_size, train_cfg.seed)
            batch = make_batch([train_items[i] for i in idx])
            try:
                value, grads, parts = gradient(params, batch, C, stats)
            except FloatingPointError as e:
                raise TrainingError(f"step {step}: {e}", str(ckpt) if ckpt else None) from e
            lr = lr_at(step, train_cfg)
            params = adam_update(params, grads, state, lr, train_cfg.adam_b1, train_cfg.adam_b2,
                                 train_cfg.adam_eps)
            rec = {"step": step, "lr": lr, "loss_total": value, "loss_sup": parts["sup"],
                   "loss_con": parts["con"]}
            result.history.append(rec)
            if metrics_fh and (step % log_every == 0):
                metrics_fh.write(json.dumps(rec) + "\n")
            done = state.step
            if done % train_cfg.eval_every == 0 or done == train_cfg.total_steps:
                run_validation(done)
            if ckpt is not None and (done % train_cfg.checkpoint_every == 0
                                     or done == train_cfg.total_steps):
                metrics_fh.flush()
                _atomic_checkpoint(ckpt, params, state, meta)
    finally:
        for fh in (metrics_fh, val_fh):
            if fh:
                fh.close()
    result.params = params
    result.steps = state.step
    result.seconds = time.perf_counter() - t0
    return result
