"""MATPOWER case parsing, dataset records (JSON lines) and model checkpoints."""
from __future__ import annotations

import enum
import io
import json
import re
import zipfile
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import (
    SOLUTION_FIELDS, Branch, BranchKind, Bus, BusType, Generator, Grid, Load,
    OpfSolution, Shunt,
)

CHECKPOINT_VERSION = 1


class CaseFormatError(ValueError):
    pass


class SchemaError(ValueError):
    def __init__(self, msg, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# MATPOWER subset
# ---------------------------------------------------------------------------

_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")
_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_MIN_COLS = {"bus": 13, "gen": 10, "branch": 13}


def _matrix(body: str, name: str) -> list[list[float]]:
    rows = []
    for raw in re.split(r"[;\n]", body):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in re.split(r"[\s,]+", line) if tok])
        except ValueError:
            raise CaseFormatError(f"malformed row in mpc.{name}: {line!r}") from None
    need = _MIN_COLS.get(name)
    for r in rows:
        if need and len(r) < need:
            raise CaseFormatError(f"malformed row in mpc.{name}: expected {need} columns, got {len(r)}")
    return rows


def parse_case(text: str, keep_inactive: bool = False) -> Grid:
    """Parse a MATPOWER case into a per-unit :class:`Grid`.

    Out-of-service generators and branches are skipped; INACTIVE buses and
    the elements attached to them are dropped unless ``keep_inactive``.
    """
    text = "\n".join(ln.split("%", 1)[0] for ln in text.splitlines())
    m = _SCALAR_RE.search(text)
    if not m:
        raise CaseFormatError("missing mpc.baseMVA")
    base = float(m.group(1))
    mats = {name: _matrix(body, name) for name, body in _MATRIX_RE.findall(text)}
    for req in ("bus", "gen", "branch", "gencost"):
        if req not in mats:
            raise CaseFormatError(f"missing mpc.{req}")

    buses, loads, shunts = [], [], []
    for row in mats["bus"]:
        bid, btype = int(row[0]), int(row[1])
        if btype not in (1, 2, 3, 4):
            raise CaseFormatError(f"bus {bid}: unknown bus type {btype}")
        buses.append(Bus(id=bid, base_kv=row[9], bus_type=BusType(btype), vmin=row[12], vmax=row[11]))
        if row[2] != 0 or row[3] != 0:
            loads.append(Load(id=len(loads), bus_id=bid, pd=row[2] / base, qd=row[3] / base))
        if row[4] != 0 or row[5] != 0:
            shunts.append(Shunt(id=len(shunts), bus_id=bid, gs=row[4] / base, bs=row[5] / base))
    known = {b.id for b in buses}
    if not any(b.bus_type == BusType.REF for b in buses):
        raise CaseFormatError("no REF bus")

    gen_rows = mats["gen"]
    cost_rows = mats["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise CaseFormatError("mpc.gencost has fewer rows than mpc.gen")
    gens = []
    for k, (row, crow) in enumerate(zip(gen_rows, cost_rows)):
        bus_id = int(row[0])
        if bus_id not in known:
            raise CaseFormatError(f"generator {k}: unknown bus {bus_id}")
        c2, c1, c0 = _poly_cost(crow, k)
        if row[7] <= 0:
            continue
        gens.append(Generator(
            id=k, bus_id=bus_id,
            pmin=row[9] / base, pmax=row[8] / base, qmin=row[4] / base, qmax=row[3] / base,
            cost_squared=c2 * base * base, cost_linear=c1 * base, cost_offset=c0,
            pg=row[1] / base, qg=row[2] / base, vg=row[5], mbase=row[6],
        ))

    branches = []
    for k, row in enumerate(mats["branch"]):
        f, t = int(row[0]), int(row[1])
        if f not in known or t not in known:
            raise CaseFormatError(f"branch {k}: unknown bus reference")
        if row[10] <= 0:
            continue
        ratio, shift = row[8], row[9]
        xfmr = ratio != 0 or shift != 0
        branches.append(Branch(
            id=k, from_bus=f, to_bus=t, br_r=row[2], br_x=row[3],
            b_fr=row[4] / 2, b_to=row[4] / 2,
            rate_a=row[5] / base, rate_b=row[6] / base, rate_c=row[7] / base,
            angmin=np.deg2rad(row[11]), angmax=np.deg2rad(row[12]),
            tap=ratio if ratio != 0 else 1.0, shift=np.deg2rad(shift),
            kind=BranchKind.TRANSFORMER if xfmr else BranchKind.AC_LINE,
        ))
    grid = Grid(buses=buses, generators=gens, loads=loads, shunts=shunts,
                branches=branches, base_mva=base)
    grid.validate()
    return grid if keep_inactive else grid.active()


def _poly_cost(crow: list[float], k: int) -> tuple[float, float, float]:
    if int(crow[0]) != 2:
        raise CaseFormatError(f"generator {k}: unsupported cost model {int(crow[0])}")
    n = int(crow[3])
    if n > 3:
        raise CaseFormatError(f"generator {k}: unsupported cost model (polynomial of degree {n - 1})")
    coeffs = crow[4:4 + n]
    if len(coeffs) < n:
        raise CaseFormatError(f"generator {k}: truncated gencost row")
    coeffs = [0.0] * (3 - n) + list(coeffs)
    return coeffs[0], coeffs[1], coeffs[2]


def load_case(name_or_path: str | Path) -> Grid:
    """Parse a case file, or a bundled case by name (e.g. ``"case14"``)."""
    p = Path(name_or_path)
    if p.exists():
        return parse_case(p.read_text())
    bundled = resources.files("gridopf") / "cases" / f"{name_or_path}.m"
    if not bundled.is_file():
        raise FileNotFoundError(name_or_path)
    return parse_case(bundled.read_text())


def format_case(grid: Grid) -> str:
    """Write a grid back out as MATPOWER text (inverse of :func:`parse_case`).

    Loads and shunts are folded into the bus Pd/Qd/Gs/Bs columns, so a grid
    with several loads on one bus does not round-trip element-by-element.
    """
    base = grid.base_mva
    pd = {b.id: 0.0 for b in grid.buses}
    qd, gs, bs = dict(pd), dict(pd), dict(pd)
    for ld in grid.loads:
        pd[ld.bus_id] += ld.pd * base
        qd[ld.bus_id] += ld.qd * base
    for s in grid.shunts:
        gs[s.bus_id] += s.gs * base
        bs[s.bus_id] += s.bs * base
    r = repr
    out = ["function mpc = case", "mpc.version = '2';", f"mpc.baseMVA = {r(float(base))};", "mpc.bus = ["]
    for b in grid.buses:
        out.append("\t" + "\t".join([str(b.id), str(int(b.bus_type)), r(pd[b.id]), r(qd[b.id]),
                                     r(gs[b.id]), r(bs[b.id]), "1", "1.0", "0.0", r(b.base_kv), "1",
                                     r(b.vmax), r(b.vmin)]) + ";")
    out += ["];", "mpc.gen = ["]
    for g in grid.generators:
        out.append("\t" + "\t".join([str(g.bus_id), r(g.pg * base), r(g.qg * base), r(g.qmax * base),
                                     r(g.qmin * base), r(g.vg), r(g.mbase), "1", r(g.pmax * base),
                                     r(g.pmin * base)]) + ";")
    out += ["];", "mpc.branch = ["]
    for br in grid.branches:
        ratio = br.tap if br.kind is BranchKind.TRANSFORMER else 0.0
        out.append("\t" + "\t".join([str(br.from_bus), str(br.to_bus), r(br.br_r), r(br.br_x),
                                     r(br.b_fr + br.b_to), r(br.rate_a * base), r(br.rate_b * base),
                                     r(br.rate_c * base), r(ratio), r(float(np.rad2deg(br.shift))), "1",
                                     r(float(np.rad2deg(br.angmin))), r(float(np.rad2deg(br.angmax)))]) + ";")
    out += ["];", "mpc.gencost = ["]
    for g in grid.generators:
        out.append("\t" + "\t".join(["2", "0", "0", "3", r(g.cost_squared / base ** 2),
                                     r(g.cost_linear / base), r(g.cost_offset)]) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------------

class Perturbation(str, enum.Enum):
    NONE = "NONE"
    LOAD_ONLY = "LOAD_ONLY"
    LOAD_AND_DROP = "LOAD_AND_DROP"


@dataclass
class ExampleMeta:
    source_case: str = ""
    perturbation: Perturbation = Perturbation.NONE
    dropped: tuple[str, int] | None = None
    seed: int = 0
    notes: list[str] = field(default_factory=list)


@dataclass
class Example:
    grid: Grid
    solution: OpfSolution | None = None
    meta: ExampleMeta = field(default_factory=ExampleMeta)

    def __post_init__(self):
        if self.meta.perturbation is Perturbation.LOAD_AND_DROP and self.meta.dropped is None:
            raise ValueError("LOAD_AND_DROP example must record the dropped element")


_ELEMENT_TABLES = {
    "bus": ("buses", Bus),
    "generator": ("generators", Generator),
    "load": ("loads", Load),
    "shunt": ("shunts", Shunt),
    "branch": ("branches", Branch),
}


def _floats(values) -> list:
    return [None if np.isnan(v) else float(v) for v in np.asarray(values, dtype=np.float64)]


def grid_to_dict(grid: Grid) -> dict:
    out = {"base_mva": float(grid.base_mva)}
    for key, (attr, cls) in _ELEMENT_TABLES.items():
        items = getattr(grid, attr)
        table = {}
        for f in fields(cls):
            col = [getattr(it, f.name) for it in items]
            if f.name == "bus_type":
                col = [bt.name for bt in col]
            elif f.name == "kind":
                col = [k.value for k in col]
            elif f.name in ("id", "bus_id", "from_bus", "to_bus"):
                col = [int(v) for v in col]
            else:
                col = [float(v) for v in col]
            table[f.name] = col
        out[key] = table
    return out


def grid_from_dict(d: dict) -> Grid:
    kw = {"base_mva": float(d["base_mva"])}
    for key, (attr, cls) in _ELEMENT_TABLES.items():
        table = d.get(key, {})
        names = [f.name for f in fields(cls)]
        lengths = {len(table.get(n, [])) for n in names}
        if len(lengths) != 1:
            raise SchemaError(f"{key} columns have unequal lengths")
        n = lengths.pop()
        items = []
        for i in range(n):
            row = {}
            for name in names:
                v = table[name][i]
                if name == "bus_type":
                    v = BusType[v]
                elif name == "kind":
                    v = BranchKind(v)
                elif name in ("id", "bus_id", "from_bus", "to_bus"):
                    v = int(v)
                else:
                    v = float(v)
                row[name] = v
            items.append(cls(**row))
        kw[attr] = items
    return Grid(**kw)


def solution_to_dict(sol: OpfSolution) -> dict:
    return {k: _floats(getattr(sol, k)) for k in SOLUTION_FIELDS}


def solution_from_dict(d: dict) -> OpfSolution:
    return OpfSolution(**{k: np.array([np.nan if v is None else v for v in d[k]], dtype=np.float64)
                          for k in SOLUTION_FIELDS})


def example_to_record(ex: Example) -> dict:
    rec = {"grid": grid_to_dict(ex.grid)}
    if ex.solution is not None:
        rec["solution"] = solution_to_dict(ex.solution)
    m = ex.meta
    rec["meta"] = {
        "source_case": m.source_case,
        "perturbation": m.perturbation.value,
        "dropped": list(m.dropped) if m.dropped is not None else None,
        "seed": int(m.seed),
        "notes": list(m.notes),
    }
    return rec


def example_from_record(rec: dict, line: int | None = None) -> Example:
    try:
        grid = grid_from_dict(rec["grid"])
        sol = solution_from_dict(rec["solution"]) if rec.get("solution") is not None else None
        if sol is not None:
            sol.check_shape(grid)
        md = rec.get("meta") or {}
        dropped = md.get("dropped")
        meta = ExampleMeta(
            source_case=md.get("source_case", ""),
            perturbation=Perturbation(md.get("perturbation", "NONE")),
            dropped=(dropped[0], int(dropped[1])) if dropped else None,
            seed=int(md.get("seed", 0)),
            notes=list(md.get("notes", [])),
        )
        return Example(grid=grid, solution=sol, meta=meta)
    except SchemaError as e:
        raise SchemaError(str(e), line) from None
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"invalid example record: {e}", line) from None


def write_example(ex: Example) -> str:
    return json.dumps(example_to_record(ex), separators=(",", ":"))


def read_example(text: str, line: int | None = None) -> Example:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}", line) from None
    return example_from_record(rec, line)


def write_examples(path: str | Path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(write_example(ex))
            fh.write("\n")


def read_examples(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                out.append(read_example(line, i))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], train_state: dict) -> None:
    """Write params plus a train state to a single ``.npz`` file.

    ``train_state`` may hold nested dicts of arrays under ``"arrays"``
    (optimizer moments); everything else must be JSON-serializable.
    """
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    for group, d in (train_state.get("arrays") or {}).items():
        for k, v in d.items():
            arrays[f"{group}/{k}"] = np.asarray(v)
    meta = {k: v for k, v in train_state.items() if k != "arrays"}
    meta["format_version"] = CHECKPOINT_VERSION
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if "__meta__" not in data:
        raise CheckpointError("checkpoint has no metadata block")
    meta = json.loads(data.pop("__meta__").tobytes().decode())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {meta.get('format_version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    params, groups = {}, {}
    for k, v in data.items():
        group, name = k.split("/", 1)
        if group == "param":
            params[name] = v
        else:
            groups.setdefault(group, {})[name] = v
    meta["arrays"] = groups
    return params, meta
