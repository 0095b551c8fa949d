"""Command-line entry point: ``gridopf <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .case_io import (grid_from_dict, grid_to_dict, load_case, read_examples,
                      solution_to_dict, write_examples)
from .grid import Grid

log = logging.getLogger("gridopf")


def _load_grid(path: str) -> Grid:
    """A grid from a MATPOWER file, a bundled case name, a grid JSON or a dataset line."""
    p = Path(path)
    if p.suffix == ".json":
        d = json.loads(p.read_text())
        return grid_from_dict(d.get("grid", d))
    if p.suffix == ".jsonl":
        return read_examples(p)[0].grid
    return load_case(path)


def _emit(obj, out: str | None, name: str):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        target = Path(out)
        if target.suffix != ".json":
            target.mkdir(parents=True, exist_ok=True)
            target = target / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text + "\n")
        print(f"wrote {target}")
    else:
        print(text)


def cmd_parse(args) -> int:
    grid = _load_grid(args.case)
    counts = grid.counts() if hasattr(grid, "counts") else {}
    print(json.dumps({"case": args.case, "counts": counts, "base_mva": grid.base_mva}, sort_keys=True))
    if args.out:
        _emit(grid_to_dict(grid), args.out, "grid.json")
    return 0


def cmd_gen(args) -> int:
    from .datagen import DatagenConfig, generate_dataset

    cfg = DatagenConfig(args.case, args.n, args.kind, seed=args.seed,
                        max_label_failure_rate=args.max_failure_rate, workers=args.workers)
    manifest = generate_dataset(cfg, args.out, None if args.label == "none" else args.label)
    print(json.dumps({k: manifest[k] for k in ("n_examples", "splits", "n_dropped")}, sort_keys=True))
    if manifest["failures"]:
        print(f"{len(manifest['failures'])} examples failed to label", file=sys.stderr)
    return 0


def cmd_label(args) -> int:
    from .datagen import LABELERS
    from .graph import StandardizationStats

    src = Path(args.dataset)
    dst = Path(args.out) if args.out else src
    dst.mkdir(parents=True, exist_ok=True)
    fn = LABELERS[args.solver]
    failures = {}
    train = []
    for name in ("train", "val", "test"):
        path = src / f"{name}.jsonl"
        if not path.exists():
            continue
        kept = []
        for i, ex in enumerate(read_examples(path)):
            try:
                ex.solution = fn(ex.grid)
            except Exception as e:  # noqa: BLE001 - recorded and skipped
                failures[f"{name}:{i}"] = f"{type(e).__name__}: {e}"
                continue
            kept.append(ex)
        write_examples(dst / f"{name}.jsonl", kept)
        if name == "train":
            train = kept
    stats = StandardizationStats.fit([e.grid for e in train], [e.solution for e in train])
    (dst / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))
    manifest_path = src / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    manifest.update({"labeled": True, "labeler": args.solver, "label_failures": failures})
    (dst / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(json.dumps({"labeled_train": len(train), "failures": len(failures)}))
    return 0


def _train_configs(args):
    from .gnn import ModelConfig, TrainConfig

    model = ModelConfig(hidden_size=args.hidden, num_message_passing_steps=args.steps,
                        decoder_mlp_size=args.decoder_size, constraint_weight=args.constraint_weight)
    train = TrainConfig(total_steps=args.total_steps, batch_size=args.batch, seed=args.seed,
                        warmup_steps=args.warmup, peak_lr=args.peak_lr,
                        transition_steps=args.transition, final_lr=args.final_lr,
                        eval_every=args.eval_every, checkpoint_every=args.checkpoint_every)
    return model, train


def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .gnn import train

    model_cfg, train_cfg = _train_configs(args)
    ds = load_dataset(args.dataset)
    res = train(train_cfg, model_cfg, ds, out_dir=args.out, resume=args.resume)
    last = res.validation[-1] if res.validation else {}
    print(json.dumps({"steps": res.steps, "seconds": round(res.seconds, 2),
                      "val_loss_total": last.get("loss_total")}))
    return 0


def cmd_eval(args) -> int:
    from .case_io import load_checkpoint
    from .datagen import load_dataset
    from .harness import evaluate, model_predictor, report_tables

    ds = load_dataset(args.dataset)
    examples = ds[args.split]
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        predictor = model_predictor(params, ds["stats"])
        name = "model"
    elif args.baseline == "dc":
        from .baselines import solve_dcopf

        def predictor(grid):
            return solve_dcopf(grid).to_opf_solution()
        name = "dc"
    else:
        raise SystemExit("eval needs --checkpoint or --baseline")
    report = evaluate(predictor, examples, with_pf=not args.no_pf)
    tables = report_tables({name: report})
    print(tables)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "tables.txt").write_text(tables)
    return 0


def cmd_pf(args) -> int:
    from .acpf import PfOptions, solve_pf
    from .case_io import solution_from_dict

    grid = _load_grid(args.grid)
    init = None
    if args.init:
        d = json.loads(Path(args.init).read_text())
        init = solution_from_dict(d.get("solution", d))
    res = solve_pf(grid, init, PfOptions(tol=args.tol, enforce_q_lims=args.enforce_q_lims))
    out = {"converged": res.converged, "iterations": res.iterations,
           "max_mismatch": res.max_mismatch, "limited_buses": res.limited_buses,
           "solution": solution_to_dict(res.solution)}
    _emit(out, args.out, "pf.json")
    return 0 if res.converged else 1


def cmd_dcopf(args) -> int:
    from .baselines import complete_dc_solution, solve_dcopf
    from .constraints import objective_cost

    grid = _load_grid(args.grid)
    dc = solve_dcopf(grid)
    sol = complete_dc_solution(grid, dc) if args.complete else dc.to_opf_solution()
    out = {"kkt": dc.kkt, "cost": objective_cost(grid, sol), "lmp": dc.lmp.tolist(),
           "solution": solution_to_dict(sol)}
    _emit(out, args.out, "dcopf.json")
    return 0


def cmd_sweep(args) -> int:
    from .datagen import load_dataset
    from .harness import improving_pairs, sweep

    model_cfg, train_cfg = _train_configs(args)
    ds = load_dataset(args.dataset)
    sizes = [int(s) for s in args.sizes.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    res = sweep(sizes, ds, train_cfg, model_cfg, seeds)
    summary = {s: {k: v for k, v in cell.items() if k != "runs"} for s, cell in res.items()}
    summary["improving_pairs"] = improving_pairs(res)
    print(json.dumps(summary, indent=1))
    if args.out:
        _emit({str(k): v for k, v in res.items()}, args.out, "sweep.json")
    return 0


def _add_train_args(p):
    p.add_argument("--dataset", required=True)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--steps", type=int, default=48, help="message passing steps")
    p.add_argument("--decoder-size", type=int, default=256)
    p.add_argument("--constraint-weight", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--total-steps", type=int, default=10_000)
    p.add_argument("--warmup", type=int, default=10_000)
    p.add_argument("--peak-lr", type=float, default=2e-4)
    p.add_argument("--transition", type=int, default=4_000)
    p.add_argument("--final-lr", type=float, default=5e-6)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--checkpoint-every", type=int, default=1_000)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridopf", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.set_defaults(fn=fn)
        return p

    p = add("parse", cmd_parse, "parse a MATPOWER case and print element counts")
    p.add_argument("--case", required=True)

    p = add("gen", cmd_gen, "generate a FullTop or TopDrop dataset")
    p.add_argument("--case", required=True)
    p.add_argument("--kind", choices=["fulltop", "topdrop"], default="fulltop")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--label", choices=["ref", "dc", "none"], default="ref")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-failure-rate", type=float, default=0.05)

    p = add("label", cmd_label, "(re)label a dataset with a reference solver")
    p.add_argument("--dataset", required=True)
    p.add_argument("--solver", choices=["penalty", "dc"], default="penalty")

    p = add("train", cmd_train, "train the GNN")
    _add_train_args(p)
    p.add_argument("--resume", default=None)

    p = add("eval", cmd_eval, "evaluate a checkpoint or baseline on a dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=["dc"], default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--no-pf", action="store_true")

    p = add("pf", cmd_pf, "solve AC power flow from the case set points or an initial solution")
    p.add_argument("--grid", required=True)
    p.add_argument("--init", default=None, help="JSON solution used as warm start and dispatch")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--enforce-q-lims", action=argparse.BooleanOptionalAction, default=True)

    p = add("dcopf", cmd_dcopf, "solve DC-OPF")
    p.add_argument("--grid", required=True)
    p.add_argument("--complete", action="store_true", help="expand to an AC solution with power flow")

    p = add("sweep", cmd_sweep, "sweep the number of message passing steps")
    _add_train_args(p)
    p.add_argument("--sizes", default="2,4,8")
    p.add_argument("--seeds", default="0,1")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
