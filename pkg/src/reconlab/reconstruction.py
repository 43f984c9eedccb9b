"""Reconstruction of microdata from published tables.

Each geography becomes an integer feasibility program: one nonnegative
integer variable per (sex, age category, race, ethnicity) cell — per
block in block mode ("b"), per (block, tract age category) in
block-plus-tract mode ("bt") — and one equality constraint per published
cell, whose support is the set of variables the cell covers.  All
constraint coefficients are 0/1.  There is no objective: any feasible
assignment is a reconstruction.

Solving is two-phase: integral bounds propagation to a fixpoint, then
depth-first search over the remaining variables with LP-relaxation
pruning.  Branching picks the variable with the smallest domain, ties
broken by lowest variable id; value order is a seeded shuffle, or
ascending when a lexicographically smallest solution is requested.  The
search is deterministic for a fixed seed and budget.
"""

from __future__ import annotations

import csv
import re
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse

from .geography import tract_of
from .population import PersonRecord
from .schema import (
    ETHS,
    GRID_B38,
    GRID_T103,
    Grid,
    SEXES,
    inventory,
)
from .tabulation import SUPPRESSED, TableBundle

# Tables whose cell 0 counts the whole population of the geography.
_TOTAL_TABLES = ("P1", "P12", "P8", "P9")

DEFAULT_NODE_BUDGET = 1_000_000
DEFAULT_TIME_BUDGET_MS = 30_000.0


class ReconstructionError(ValueError):
    pass


@dataclass
class ReconProblem:
    """A reduced integer feasibility program for one geography.

    Variables are the grid cells that survive zero-cell reduction: any
    cell covered by a published zero is dropped, as is any cell no
    selected table covers.  ``rows`` holds each remaining constraint's
    support as indices into the variable arrays.
    """

    scope: str
    mode: str                       # "b" or "bt"
    grid: Grid
    blocks: tuple[str, ...]
    var_block: np.ndarray           # index into blocks, per variable
    var_cell: np.ndarray            # flat grid index, per variable
    lb: np.ndarray
    ub: np.ndarray
    rows: list[np.ndarray]
    rhs: np.ndarray
    row_names: list[str]
    n_total: int | None             # declared population, when derivable
    unreconstructable: bool = False
    build_note: str = ""
    infeasible_reason: str | None = None

    @property
    def n_vars(self) -> int:
        return int(self.var_cell.size)

    def var_key(self, i: int) -> str:
        key = self.grid.cell_key(int(self.var_cell[i]))
        if self.mode == "bt":
            return f"{self.blocks[self.var_block[i]][-4:]}_{key}"
        return key

    def var_keys(self) -> list[str]:
        return [self.var_key(i) for i in range(self.n_vars)]

    def matrix(self) -> sparse.csr_matrix:
        """Constraint matrix over the reduced variables (0/1 entries)."""
        indptr = [0]
        indices: list[np.ndarray] = []
        for idx in self.rows:
            indices.append(idx)
            indptr.append(indptr[-1] + idx.size)
        data = np.ones(indptr[-1], dtype=np.int8)
        ind = np.concatenate(indices) if indices else np.empty(0, dtype=np.int64)
        return sparse.csr_matrix(
            (data, ind, np.asarray(indptr)), shape=(len(self.rows), self.n_vars)
        )


@dataclass
class ReconSolution:
    scope: str
    mode: str
    status: str                     # feasible | infeasible | budget_exceeded | unreconstructable
    values: np.ndarray | None
    nodes: int = 0
    propagations: int = 0
    millis: float = 0.0
    partial_lb: np.ndarray | None = None
    partial_ub: np.ndarray | None = None
    note: str = ""


# ---------------------------------------------------------------------------
# Problem construction


def _selected_tables(bundle: TableBundle, tables: tuple[str, ...] | None, level: str) -> tuple[str, ...]:
    inv = inventory()
    if tables is None:
        pool = bundle.block_tables if level == "block" else bundle.tract_tables
        return tuple(n for n in pool if inv[n].level == level)
    out = []
    for n in tables:
        if inv[n].level == level:
            out.append(n)
    return tuple(out)


def _geo_rows(
    bundle: TableBundle, geo: str, names: tuple[str, ...], grid: Grid, offset: int
) -> tuple[list[np.ndarray], list[int], list[str]]:
    """Constraint support/rhs/name triples for one geography's tables.

    Suppressed cells are skipped: suppression withholds the count, so no
    constraint can assert it.
    """
    inv = inventory()
    rows: list[np.ndarray] = []
    rhs: list[int] = []
    names_out: list[str] = []
    for name in names:
        if not bundle.has(geo, name):
            continue
        counts = bundle.get(geo, name)
        m = inv.matrix(name, grid)
        for ci in range(m.shape[0]):
            v = int(counts[ci])
            if v == SUPPRESSED:
                continue
            idx = m.indices[m.indptr[ci] : m.indptr[ci + 1]].astype(np.int64)
            rows.append(idx + offset)
            rhs.append(v)
            names_out.append(f"{name}[{ci}]@{geo}")
    return rows, rhs, names_out


def _derive_total(bundle: TableBundle, block: str) -> int | None:
    for name in _TOTAL_TABLES:
        if bundle.has(block, name):
            v = int(bundle.get(block, name)[0])
            if v != SUPPRESSED:
                return v
    return None


def _reduce_problem(
    scope: str,
    mode: str,
    grid: Grid,
    blocks: tuple[str, ...],
    n_global: int,
    rows: list[np.ndarray],
    rhs: list[int],
    row_names: list[str],
    n_total: int | None,
) -> ReconProblem:
    zero = np.zeros(n_global, dtype=bool)
    covered = np.zeros(n_global, dtype=bool)
    for idx, r in zip(rows, rhs):
        if r == 0:
            zero[idx] = True
        else:
            covered[idx] = True
    keep = covered & ~zero
    new_index = np.full(n_global, -1, dtype=np.int64)
    kept = np.flatnonzero(keep)
    new_index[kept] = np.arange(kept.size)

    per_block = grid.size
    var_block = (kept // per_block).astype(np.int32)
    var_cell = kept % per_block

    out_rows: list[np.ndarray] = []
    out_rhs: list[int] = []
    out_names: list[str] = []
    infeasible_reason = None
    cap = n_total if n_total is not None else (max(rhs) if rhs else 0)
    ub = np.full(kept.size, cap, dtype=np.int64)
    for idx, r, name in zip(rows, rhs, row_names):
        if r == 0:
            continue
        sup = new_index[idx]
        sup = sup[sup >= 0]
        if sup.size == 0:
            if infeasible_reason is None:
                infeasible_reason = f"constraint {name} = {r} has no remaining variables"
            continue
        np.minimum.at(ub, sup, r)
        out_rows.append(np.sort(sup))
        out_rhs.append(r)
        out_names.append(name)

    return ReconProblem(
        scope=scope,
        mode=mode,
        grid=grid,
        blocks=blocks,
        var_block=var_block,
        var_cell=var_cell,
        lb=np.zeros(kept.size, dtype=np.int64),
        ub=ub,
        rows=out_rows,
        rhs=np.asarray(out_rhs, dtype=np.int64),
        row_names=out_names,
        n_total=n_total,
        infeasible_reason=infeasible_reason,
    )


def build_problem_b(
    bundle: TableBundle, block: str, tables: tuple[str, ...] | None = None
) -> ReconProblem:
    """Block-mode problem: variables on the 38-bin age grid for one block."""
    names = _selected_tables(bundle, tables, "block")
    rows, rhs, row_names = _geo_rows(bundle, block, names, GRID_B38, 0)
    n_total = _derive_total(bundle, block)
    p = _reduce_problem(block, "b", GRID_B38, (block,), GRID_B38.size, rows, rhs, row_names, n_total)
    if n_total is None:
        p.unreconstructable = True
        p.build_note = "no unsuppressed population total available"
    return p


def build_problem_bt(
    bundle: TableBundle, tract: str, tables: tuple[str, ...] | None = None
) -> ReconProblem:
    """Tract-mode problem: per-block variables on the 103-category age grid.

    Couples every member block's tables with the tract's sex-by-age
    tables, so single-year ages flow down to blocks where the combined
    system pins them.
    """
    member_blocks = tuple(b for b in bundle.blocks if tract_of(b) == tract)
    if not member_blocks:
        raise ReconstructionError(f"tract {tract} has no blocks in the bundle")
    block_names = _selected_tables(bundle, tables, "block")
    tract_names = _selected_tables(bundle, tables, "tract")

    per_block = GRID_T103.size
    rows: list[np.ndarray] = []
    rhs: list[int] = []
    row_names: list[str] = []
    totals: list[int | None] = []
    for bi, block in enumerate(member_blocks):
        r, v, n = _geo_rows(bundle, block, block_names, GRID_T103, bi * per_block)
        rows.extend(r)
        rhs.extend(v)
        row_names.extend(n)
        totals.append(_derive_total(bundle, block))

    inv = inventory()
    for name in tract_names:
        if not bundle.has(tract, name):
            continue
        counts = bundle.get(tract, name)
        m = inv.matrix(name, GRID_T103)
        for ci in range(m.shape[0]):
            v = int(counts[ci])
            if v == SUPPRESSED:
                continue
            pattern = m.indices[m.indptr[ci] : m.indptr[ci + 1]].astype(np.int64)
            sup = np.concatenate([pattern + bi * per_block for bi in range(len(member_blocks))])
            rows.append(sup)
            rhs.append(v)
            row_names.append(f"{name}[{ci}]@{tract}")

    n_total = None if any(t is None for t in totals) else int(sum(totals))  # type: ignore[arg-type]
    p = _reduce_problem(
        tract, "bt", GRID_T103, member_blocks, per_block * len(member_blocks),
        rows, rhs, row_names, n_total,
    )
    if n_total is None:
        p.unreconstructable = True
        p.build_note = "some member block lacks an unsuppressed population total"
    return p


# ---------------------------------------------------------------------------
# Propagation and search


def propagate_bounds(
    rows: list[np.ndarray], rhs: np.ndarray, lb: np.ndarray, ub: np.ndarray,
    max_sweeps: int = 10_000,
) -> tuple[bool, int]:
    """Tighten integer bounds against equality rows until a fixpoint.

    Mutates ``lb``/``ub`` in place.  Returns (feasible-so-far, sweeps).
    Sound: every integer solution inside the input box stays inside the
    output box.
    """
    sweeps = 0
    changed = True
    while changed and sweeps < max_sweeps:
        sweeps += 1
        changed = False
        for idx, r in zip(rows, rhs):
            l = lb[idx]
            u = ub[idx]
            s_lb = int(l.sum())
            s_ub = int(u.sum())
            if s_lb > r or s_ub < r:
                return False, sweeps
            new_u = r - s_lb + l
            if (new_u < u).any():
                np.minimum(u, new_u, out=u)
                ub[idx] = u
                s_ub = int(u.sum())
                if s_ub < r:
                    return False, sweeps
                changed = True
            new_l = r - s_ub + u
            if (new_l > l).any():
                np.maximum(l, new_l, out=l)
                lb[idx] = l
                if (l > u).any():
                    return False, sweeps
                changed = True
    return True, sweeps


class _Budget:
    def __init__(self, node_budget: int, time_budget_ms: float) -> None:
        self.node_budget = node_budget
        self.deadline = time.perf_counter() + time_budget_ms / 1000.0
        self.nodes = 0
        self.propagations = 0

    def spend_node(self) -> bool:
        self.nodes += 1
        if self.nodes > self.node_budget:
            return False
        if self.nodes % 64 == 0 and time.perf_counter() > self.deadline:
            return False
        return True


def _lp_feasible(a_eq: sparse.csr_matrix, rhs: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> bool:
    res = optimize.linprog(
        c=np.zeros(lb.size),
        A_eq=a_eq,
        b_eq=rhs,
        bounds=np.column_stack((lb, ub)),
        method="highs",
    )
    # Statuses other than explicit infeasibility never prune.
    return res.status != 2


def solve_feasible(
    problem: ReconProblem,
    seed: int = 0,
    node_budget: int = DEFAULT_NODE_BUDGET,
    time_budget_ms: float = DEFAULT_TIME_BUDGET_MS,
    lexmin: bool = False,
    lp_prune: bool = True,
) -> ReconSolution:
    """Find one feasible integer assignment for a reconstruction problem."""
    t0 = time.perf_counter()

    def done(status: str, values: np.ndarray | None, budget: _Budget | None,
             plb: np.ndarray | None = None, pub: np.ndarray | None = None,
             note: str = "") -> ReconSolution:
        return ReconSolution(
            scope=problem.scope,
            mode=problem.mode,
            status=status,
            values=values,
            nodes=budget.nodes if budget else 0,
            propagations=budget.propagations if budget else 0,
            millis=(time.perf_counter() - t0) * 1000.0,
            partial_lb=plb,
            partial_ub=pub,
            note=note,
        )

    if problem.unreconstructable:
        return done("unreconstructable", None, None, note=problem.build_note)
    if problem.infeasible_reason is not None:
        return done("infeasible", None, None, note=problem.infeasible_reason)
    if problem.n_vars == 0:
        # Nothing left after reduction; feasible iff no positive rhs remains.
        return done("feasible", np.zeros(0, dtype=np.int64), None)

    budget = _Budget(node_budget, time_budget_ms)
    rng = np.random.default_rng(seed)
    a_eq = problem.matrix() if lp_prune else None

    root_lb = problem.lb.copy()
    root_ub = problem.ub.copy()
    ok, sweeps = propagate_bounds(problem.rows, problem.rhs, root_lb, root_ub)
    budget.propagations += sweeps
    if not ok:
        return done("infeasible", None, budget, note="propagation found a contradiction")

    # Each stack frame: (lb, ub, branch var, iterator over remaining values).
    stack: list[tuple[np.ndarray, np.ndarray, int, list[int]]] = []

    def open_node(lb: np.ndarray, ub: np.ndarray) -> ReconSolution | None:
        """Propagate, then either finish, prune, or push a branch frame."""
        free = np.flatnonzero(ub > lb)
        if free.size == 0:
            return done("feasible", lb.copy(), budget)
        if lp_prune and not _lp_feasible(a_eq, problem.rhs, lb, ub):
            return None
        if lexmin:
            v = int(free[0])
            values = list(range(int(lb[v]), int(ub[v]) + 1))
        else:
            v = int(free[np.argmin((ub - lb)[free])])
            values = list(range(int(lb[v]), int(ub[v]) + 1))
            rng.shuffle(values)
        stack.append((lb, ub, v, values))
        return None

    result = open_node(root_lb, root_ub)
    if result is not None:
        return result
    while stack:
        lb, ub, v, values = stack[-1]
        if not values:
            stack.pop()
            continue
        val = values.pop(0)
        if not budget.spend_node():
            return done(
                "budget_exceeded", None, budget, plb=root_lb, pub=root_ub,
                note="node or time budget exhausted",
            )
        child_lb = lb.copy()
        child_ub = ub.copy()
        child_lb[v] = child_ub[v] = val
        ok, sweeps = propagate_bounds(problem.rows, problem.rhs, child_lb, child_ub)
        budget.propagations += sweeps
        if not ok:
            continue
        result = open_node(child_lb, child_ub)
        if result is not None:
            return result
    return done("infeasible", None, budget, note="search exhausted")


# ---------------------------------------------------------------------------
# Assembly into microdata


def solution_records(problem: ReconProblem, values: np.ndarray) -> list[PersonRecord]:
    """Expand a solution vector into person records.

    Ages take the lowest year of their category; ids are absent.  Rows
    come out sorted by (block, grid cell).
    """
    recs: list[PersonRecord] = []
    order = np.lexsort((problem.var_cell, problem.var_block))
    for i in order:
        k = int(values[i])
        if k <= 0:
            continue
        sex, agecat, race, eth = problem.grid.unflat(int(problem.var_cell[i]))
        rec = PersonRecord(
            pid=None,
            hid=None,
            block=problem.blocks[problem.var_block[i]],
            sex=SEXES[sex],
            age=problem.grid.age_of_cat(agecat),
            race=race,
            eth=ETHS[eth],
        )
        recs.extend([rec] * k)
    return recs


SOLVER_REPORT_HEADER = ("geocode", "status", "nodes", "millis")


@dataclass(frozen=True)
class SolverReportRow:
    geocode: str
    status: str
    nodes: int
    millis: float


def write_solver_report(rows: list[SolverReportRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLVER_REPORT_HEADER)
        for r in rows:
            w.writerow([r.geocode, r.status, r.nodes, f"{r.millis:.3f}"])


def read_solver_report(path: str) -> list[SolverReportRow]:
    out: list[SolverReportRow] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != SOLVER_REPORT_HEADER:
            raise ReconstructionError(f"{path}: bad solver report header {header}")
        for row in reader:
            out.append(SolverReportRow(row[0], row[1], int(row[2]), float(row[3])))
    return out


def assemble_rhdf(
    bundle: TableBundle,
    mode: str = "b",
    tables: tuple[str, ...] | None = None,
    seed: int = 0,
    node_budget: int = DEFAULT_NODE_BUDGET,
    time_budget_ms: float = DEFAULT_TIME_BUDGET_MS,
    lexmin: bool = False,
) -> tuple[list[PersonRecord], list[SolverReportRow]]:
    """Reconstruct every geography in the bundle and concatenate the records.

    Mode "b" solves one problem per block on binned ages; mode "bt"
    solves one per tract on single-year categories.  Geographies that
    fail (infeasible, budget exceeded, unreconstructable) contribute no
    records and are flagged in the report.
    """
    if mode not in ("b", "bt"):
        raise ReconstructionError(f"mode must be 'b' or 'bt', got {mode!r}")
    scopes = bundle.blocks if mode == "b" else bundle.tracts
    records: list[PersonRecord] = []
    report: list[SolverReportRow] = []
    for scope in scopes:
        if mode == "b":
            problem = build_problem_b(bundle, scope, tables)
        else:
            problem = build_problem_bt(bundle, scope, tables)
        sol = solve_feasible(
            problem, seed=seed, node_budget=node_budget,
            time_budget_ms=time_budget_ms, lexmin=lexmin,
        )
        report.append(SolverReportRow(scope, sol.status, sol.nodes, sol.millis))
        if sol.status == "feasible" and sol.values is not None:
            records.extend(solution_records(problem, sol.values))
    return records, report


# ---------------------------------------------------------------------------
# LP export and external-solution verification


def _lp_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]", "_", text)


def export_lp(problem: ReconProblem, path: str) -> None:
    """Write the problem in LP text format with variables named x_<cellkey>."""
    names = [f"x_{_lp_name(problem.var_key(i))}" for i in range(problem.n_vars)]
    lines: list[str] = []
    lines.append(f"\\ reconstruction {problem.scope} mode={problem.mode} grid={problem.grid.name}")
    for bi, b in enumerate(problem.blocks):
        lines.append(f"\\ block {bi}: {b}")
    lines.append("Minimize")
    lines.append(f" obj: 0 {names[0]}" if names else " obj: 0 x_none")
    lines.append("Subject To")
    for ri, (idx, r, rname) in enumerate(zip(problem.rows, problem.rhs, problem.row_names)):
        terms = " + ".join(names[i] for i in idx.tolist())
        lines.append(f" c{ri}_{_lp_name(rname)}: {terms} = {int(r)}")
    lines.append("Bounds")
    for i, name in enumerate(names):
        lines.append(f" {int(problem.lb[i])} <= {name} <= {int(problem.ub[i])}")
    lines.append("General")
    for name in names:
        lines.append(f" {name}")
    lines.append("End")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def import_solution(path: str) -> dict[str, int]:
    """Read a solver solution file of ``<variable> <value>`` lines.

    Comment lines starting with ``#`` and blank lines are skipped;
    fractional values are rejected.
    """
    out: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ReconstructionError(f"{path}:{lineno}: expected '<name> <value>'")
            name, value_s = parts
            value = float(value_s)
            if abs(value - round(value)) > 1e-6:
                raise ReconstructionError(f"{path}:{lineno}: fractional value {value_s}")
            key = name[2:] if name.startswith("x_") else name
            out[key] = int(round(value))
    return out


def verify_solution(problem: ReconProblem, counts: dict[str, int]) -> str | None:
    """Check an assignment against bounds, integrality, and every constraint.

    ``counts`` maps variable cell keys to values; missing keys mean zero.
    Returns None when everything holds, else a description of the first
    violation.
    """
    keys = {_lp_name(problem.var_key(i)): i for i in range(problem.n_vars)}
    x = np.zeros(problem.n_vars, dtype=np.int64)
    for key, v in counts.items():
        norm = _lp_name(key)
        if norm not in keys:
            return f"unknown variable {key!r}"
        if not float(v).is_integer():
            return f"variable {key!r} has non-integer value {v!r}"
        x[keys[norm]] = int(v)
    bad = np.flatnonzero((x < problem.lb) | (x > problem.ub))
    if bad.size:
        i = int(bad[0])
        return (
            f"variable {problem.var_key(i)} = {int(x[i])} outside "
            f"[{int(problem.lb[i])}, {int(problem.ub[i])}]"
        )
    for idx, r, name in zip(problem.rows, problem.rhs, problem.row_names):
        got = int(x[idx].sum())
        if got != r:
            return f"constraint {name}: sum {got} != {int(r)}"
    return None
