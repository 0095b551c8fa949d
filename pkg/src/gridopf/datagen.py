"""FullTop / TopDrop dataset generation with per-example seeding."""
from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .case_io import Example, ExampleMeta, Perturbation, load_case, write_example
from .grid import BusType, Grid, OpfSolution, is_connected

log = logging.getLogger(__name__)

MAX_RESAMPLES = 1000


class DatasetKind(str, enum.Enum):
    FULLTOP = "fulltop"
    TOPDROP = "topdrop"


class DatagenError(RuntimeError):
    pass


@dataclass
class DatagenConfig:
    base_case: str
    n_examples: int
    dataset_kind: DatasetKind = DatasetKind.FULLTOP
    load_perturbation_fraction: float = 0.20
    drop_probability: float = 0.5
    split_fractions: tuple[float, float, float] = (0.90, 0.05, 0.05)
    seed: int = 0
    max_label_failure_rate: float = 0.05
    workers: int = 1

    def __post_init__(self):
        self.dataset_kind = DatasetKind(self.dataset_kind)
        self.split_fractions = tuple(float(x) for x in self.split_fractions)
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be three numbers summing to 1")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        if self.n_examples < 0:
            raise ValueError("n_examples must be nonnegative")


def perturb_loads(grid: Grid, rng: np.random.Generator, fraction: float = 0.20) -> Grid:
    """Scale every pd and qd by an independent factor drawn from U[1-f, 1+f]."""
    n = len(grid.loads)
    u = rng.uniform(-fraction, fraction, size=(n, 2))
    loads = [replace(ld, pd=ld.pd * (1.0 + u[i, 0]), qd=ld.qd * (1.0 + u[i, 1]))
             for i, ld in enumerate(grid.loads)]
    return replace(grid, loads=tuple(loads))


def eligible_generators(grid: Grid) -> list[int]:
    ref_ids = {b.id for b in grid.buses if b.bus_type == BusType.REF}
    return [g.id for g in grid.generators if g.bus_id not in ref_ids]


def drop_component(grid: Grid, rng: np.random.Generator,
                   notes: list[str] | None = None) -> tuple[Grid, tuple[str, int]]:
    """Remove one generator (not on a REF bus) or one branch, coin-flip first.

    Branch drops that disconnect the grid are rejected and the draw is
    repeated, coin included.  A generator coin with no eligible generator
    falls back to a branch drop (noted in ``notes``).
    """
    gens = eligible_generators(grid)
    branch_ids = [br.id for br in grid.branches]
    if not gens and not any(is_connected(grid.without("branch", b)) for b in branch_ids):
        raise DatagenError("no eligible component to drop: no generator off the REF bus "
                           "and every branch is a bridge")
    for _ in range(MAX_RESAMPLES):
        if rng.random() < 0.5:
            if gens:
                gid = gens[int(rng.integers(len(gens)))]
                return grid.without("generator", gid), ("generator", gid)
            if notes is not None and "no eligible generator; dropped a branch" not in notes:
                notes.append("no eligible generator; dropped a branch")
        if not branch_ids:
            continue
        bid = branch_ids[int(rng.integers(len(branch_ids)))]
        candidate = grid.without("branch", bid)
        if is_connected(candidate):
            return candidate, ("branch", bid)
    raise DatagenError(f"no connected N-1 variant found after {MAX_RESAMPLES} draws")


Labeler = Callable[[Grid], OpfSolution]


def penalty_labeler(grid: Grid) -> OpfSolution:
    from .baselines import solve_acopf_penalty
    res = solve_acopf_penalty(grid)
    if not res.converged:
        raise RuntimeError(f"penalty solver did not reach tolerance (balance {res.max_balance:.2e})")
    return res.solution


def dc_labeler(grid: Grid) -> OpfSolution:
    from .baselines import complete_dc_solution, solve_dcopf
    return complete_dc_solution(grid, solve_dcopf(grid))


LABELERS: dict[str, Labeler | None] = {"ref": penalty_labeler, "penalty": penalty_labeler,
                                       "dc": dc_labeler, "none": None}


def make_example(base: Grid, config: DatagenConfig, index: int,
                 labeler: Labeler | None = None) -> tuple[Example | None, str | None]:
    """Example ``index`` drawn from the child RNG seeded by ``(seed, index)``.

    Returns ``(example, None)`` or ``(None, failure_reason)`` when labeling fails.
    """
    rng = np.random.default_rng([config.seed, index])
    grid = perturb_loads(base, rng, config.load_perturbation_fraction)
    meta = ExampleMeta(source_case=Path(str(config.base_case)).name,
                       perturbation=Perturbation.LOAD_ONLY, seed=config.seed,
                       notes=[f"index={index}"])
    if config.dataset_kind is DatasetKind.TOPDROP and rng.random() < config.drop_probability:
        grid, dropped = drop_component(grid, rng, meta.notes)
        meta.perturbation = Perturbation.LOAD_AND_DROP
        meta.dropped = dropped
    solution = None
    if labeler is not None:
        try:
            solution = labeler(grid)
        except Exception as e:  # noqa: BLE001 - any solver failure marks the example
            return None, f"{type(e).__name__}: {e}"
    return Example(grid=grid, solution=solution, meta=meta), None


def split_indices(n: int, fractions, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, n, 1]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    return (np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]),
            np.sort(order[n_train + n_val:]))


def _make_worker(args):
    base, config, index, label_kind = args
    return make_example(base, config, index, LABELERS[label_kind])


def generate_examples(config: DatagenConfig, labeler: Labeler | str | None = None
                      ) -> tuple[list[Example], dict[int, str]]:
    """All examples in index order plus ``{index: reason}`` for labeling failures."""
    base = load_case(config.base_case)
    if isinstance(labeler, str) and config.workers > 1:
        jobs = [(base, config, i, labeler) for i in range(config.n_examples)]
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_make_worker, jobs, chunksize=16))
    else:
        fn = LABELERS[labeler] if isinstance(labeler, str) else labeler
        results = [make_example(base, config, i, fn) for i in range(config.n_examples)]
    examples, failures = [], {}
    for i, (ex, why) in enumerate(results):
        if ex is None:
            failures[i] = why
        else:
            examples.append(ex)
    cap = config.max_label_failure_rate * max(config.n_examples, 1)
    if len(failures) > cap:
        first = next(iter(failures.items()))
        raise DatagenError(f"{len(failures)} of {config.n_examples} examples failed to label "
                           f"(cap {config.max_label_failure_rate:.0%}); first: #{first[0]} {first[1]}")
    return examples, failures


def generate_dataset(config: DatagenConfig, out_dir: str | Path,
                     labeler: Labeler | str | None = None) -> dict:
    """Write ``train/val/test.jsonl``, ``manifest.json`` and ``stats.json``."""
    from .graph import StandardizationStats

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples, failures = generate_examples(config, labeler)
    parts = split_indices(len(examples), config.split_fractions, config.seed)
    names = ("train", "val", "test")
    for name, idx in zip(names, parts):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for i in idx:
                fh.write(write_example(examples[i]))
                fh.write("\n")
    train = [examples[i] for i in parts[0]]
    stats = StandardizationStats.fit([e.grid for e in train], [e.solution for e in train])
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))
    cfg = asdict(config)
    cfg["dataset_kind"] = config.dataset_kind.value
    cfg["base_case"] = str(config.base_case)
    cfg.pop("workers")
    manifest = {
        "config": cfg,
        "labeled": labeler is not None,
        "labeler": labeler if isinstance(labeler, str) else getattr(labeler, "__name__", None),
        "n_examples": len(examples),
        "splits": {n: len(p) for n, p in zip(names, parts)},
        "failures": {str(k): v for k, v in failures.items()},
        "n_dropped": sum(e.meta.perturbation is Perturbation.LOAD_AND_DROP for e in examples),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(path: str | Path) -> dict:
    """Read a dataset directory: splits, stats and manifest."""
    from .case_io import read_examples
    from .graph import StandardizationStats

    p = Path(path)
    out = {name: read_examples(p / f"{name}.jsonl") if (p / f"{name}.jsonl").exists() else []
           for name in ("train", "val", "test")}
    out["stats"] = StandardizationStats.from_dict(json.loads((p / "stats.json").read_text()))
    out["manifest"] = json.loads((p / "manifest.json").read_text()) if (p / "manifest.json").exists() else {}
    return out
