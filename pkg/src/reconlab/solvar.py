"""Solution variability: how far two reconstructions of a block can differ.

For a block with population N, d* is the largest number of records that
can differ between any two feasible solutions of the block's problem,
measured on the unordered record multiset: d* = max over feasible pairs
(x, y) of N - sum_c min(x_c, y_c).  solvar = 100 * d* / N.  A solvar of
0 proves the reconstruction is unique on (sex, agebin, race, ethnicity).
max_solvar = 2 * solvar (capped at 100) bounds the divergence of any
single solution from any other, by the triangle inequality.

The two-copy program is solved as a MILP: duplicate variable vectors x
and y each satisfy every constraint; per cell, an overlap variable m_c
with binary selector z_c satisfies m_c >= x_c - U_c z_c and
m_c >= y_c - U_c (1 - z_c), so minimizing sum m_c attains
sum min(x_c, y_c).  Only variables left free after bounds propagation
enter the MILP; propagation-fixed cells contribute a constant overlap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse

from .reconstruction import ReconProblem, propagate_bounds

SOLVAR_CSV_HEADER = ("geocode", "population", "dstar", "solvar", "max_solvar", "status")
CUMSOLVAR_CSV_HEADER = (
    "percentile", "solvar", "max_solvar", "population",
    "cum_population", "cum_solvar", "max_cum_solvar",
)

DEFAULT_PERCENT_GRID = tuple(range(5, 101, 5))


class SolvarError(ValueError):
    pass


@dataclass(frozen=True)
class SolvarResult:
    block: str
    population: int
    dstar: int
    solvar: float
    max_solvar: float
    status: str                 # "exact" or "budget_exceeded_lower_bound"

    @property
    def is_exact(self) -> bool:
        return self.status == "exact"


@dataclass(frozen=True)
class CumSolvarRow:
    percentile: float
    solvar: float               # boundary block's solvar at this percentile
    max_solvar: float
    population: int             # population of blocks in this percentile slice
    cum_population: int
    cum_solvar: float           # population-weighted mean over the sorted prefix
    max_cum_solvar: float


@dataclass(frozen=True)
class CumSolvarTable:
    rows: tuple[CumSolvarRow, ...]
    order: tuple[str, ...]      # block geocodes in the sorted order used


def _result(block: str, n: int, dstar: int, status: str) -> SolvarResult:
    if n > 0:
        sv = 100.0 * dstar / n
    else:
        sv = 0.0
    return SolvarResult(
        block=block,
        population=n,
        dstar=dstar,
        solvar=sv,
        max_solvar=min(2.0 * sv, 100.0),
        status=status,
    )


def compute_solvar(
    problem: ReconProblem,
    seed: int = 0,
    time_budget_ms: float = 30_000.0,
) -> SolvarResult:
    """Exact (or lower-bounded, on budget exhaustion) solvar for one block."""
    if problem.mode != "b":
        raise SolvarError("solution variability is defined on block-mode problems")
    if problem.unreconstructable:
        raise SolvarError(f"block {problem.scope} is unreconstructable: {problem.build_note}")
    if problem.infeasible_reason is not None:
        raise SolvarError(f"block {problem.scope} is infeasible: {problem.infeasible_reason}")
    n = problem.n_total
    if n is None:
        raise SolvarError(f"block {problem.scope} has no population total")
    if n == 0 or problem.n_vars == 0:
        return _result(problem.scope, n, 0, "exact")

    lb = problem.lb.copy()
    ub = problem.ub.copy()
    ok, _ = propagate_bounds(problem.rows, problem.rhs, lb, ub)
    if not ok:
        raise SolvarError(f"block {problem.scope} is infeasible under propagation")

    free = np.flatnonzero(ub > lb)
    fixed_total = int(lb[ub == lb].sum())
    if free.size == 0:
        # Propagation pinned every cell; the solution is unique.
        return _result(problem.scope, n, 0, "exact")

    # Restrict each constraint to the free variables, moving fixed cells
    # into the right-hand side.  A population total over all variables
    # must survive, otherwise the two copies could have different sizes
    # and the difference measure is ill-defined.
    pos_of = np.full(problem.n_vars, -1, dtype=np.int64)
    pos_of[free] = np.arange(free.size)
    red_rows: list[np.ndarray] = []
    red_rhs: list[int] = []
    has_total = False
    for idx, r in zip(problem.rows, problem.rhs):
        sup = pos_of[idx]
        keep = sup >= 0
        fixed_part = int(lb[idx[~keep]].sum())
        sup = sup[keep]
        if sup.size == 0:
            continue
        red_rows.append(sup)
        red_rhs.append(int(r) - fixed_part)
        if sup.size == free.size:
            has_total = True
    if not has_total:
        raise SolvarError(
            f"block {problem.scope}: no constraint covers every free cell; "
            "population is not pinned, so divergence is unbounded"
        )

    nf = free.size
    L = lb[free].astype(float)
    U = ub[free].astype(float)
    n_free_pop = n - fixed_total

    # Variable layout: x (nf), y (nf), m (nf), z (nf).
    n_all = 4 * nf
    c = np.concatenate([np.zeros(nf), np.zeros(nf), np.ones(nf), np.zeros(nf)])
    integrality = np.concatenate(
        [np.ones(nf), np.ones(nf), np.zeros(nf), np.ones(nf)]
    )
    lo = np.concatenate([L, L, np.zeros(nf), np.zeros(nf)])
    hi = np.concatenate([U, U, U, np.ones(nf)])

    constraints = []
    a_rows = []
    for sup, r in zip(red_rows, red_rhs):
        data = np.ones(sup.size)
        a_rows.append((sup, data, float(r)))
    # Equalities for the x copy, then the y copy.
    for offset in (0, nf):
        ind = []
        indptr = [0]
        vals = []
        b = []
        for sup, data, r in a_rows:
            ind.append(sup + offset)
            vals.append(data)
            indptr.append(indptr[-1] + sup.size)
            b.append(r)
        a = sparse.csr_matrix(
            (np.concatenate(vals), np.concatenate(ind), np.asarray(indptr)),
            shape=(len(a_rows), n_all),
        )
        bv = np.asarray(b)
        constraints.append(optimize.LinearConstraint(a, bv, bv))
    eye = sparse.identity(nf, format="csr")
    u_diag = sparse.diags(U, format="csr")
    zero = sparse.csr_matrix((nf, nf))
    # m - x + U z >= 0
    a1 = sparse.hstack([-eye, zero, eye, u_diag], format="csr")
    constraints.append(optimize.LinearConstraint(a1, np.zeros(nf), np.full(nf, np.inf)))
    # m - y - U z >= -U
    a2 = sparse.hstack([zero, -eye, eye, -u_diag], format="csr")
    constraints.append(optimize.LinearConstraint(a2, -U, np.full(nf, np.inf)))

    res = optimize.milp(
        c=c,
        constraints=constraints,
        integrality=integrality,
        bounds=optimize.Bounds(lo, hi),
        options={"time_limit": time_budget_ms / 1000.0},
    )

    if res.status == 0:
        overlap = int(round(res.fun))
        dstar = n_free_pop - overlap
        return _result(problem.scope, n, dstar, "exact")
    if res.x is not None:
        # Time limit with an incumbent: read off the pair it found.
        x = np.round(res.x[:nf]).astype(np.int64)
        y = np.round(res.x[nf : 2 * nf]).astype(np.int64)
        dstar = int(n_free_pop - np.minimum(x, y).sum())
        return _result(problem.scope, n, max(dstar, 0), "budget_exceeded_lower_bound")
    if res.status == 1:
        # Budget exhausted before any incumbent; zero is still a valid lower bound.
        return _result(problem.scope, n, 0, "budget_exceeded_lower_bound")
    raise SolvarError(f"block {problem.scope}: two-copy program failed ({res.message})")


def cumsolvar(
    results: list[SolvarResult],
    percent_grid: tuple[int, ...] = DEFAULT_PERCENT_GRID,
    seed: int = 0,
) -> CumSolvarTable:
    """Percentile table of per-block solvar, sorted ascending, with
    population-weighted cumulative solvar over each prefix.

    Percentiles are over blocks, not persons.  Ties in solvar are broken
    randomly under the seed, so slice populations can vary a little
    between seeds while every cumulative value at a tie boundary stays
    well-defined.
    """
    if not results:
        return CumSolvarTable(rows=(), order=())
    rng = np.random.default_rng(seed)
    jitter = rng.random(len(results))
    order_idx = sorted(
        range(len(results)), key=lambda i: (results[i].solvar, jitter[i])
    )
    ordered = [results[i] for i in order_idx]
    nblocks = len(ordered)
    pops = np.array([r.population for r in ordered], dtype=np.int64)
    dstars = np.array([r.dstar for r in ordered], dtype=np.int64)
    cum_pop = np.cumsum(pops)
    cum_d = np.cumsum(dstars)

    rows = []
    prev_k = 0
    for q in percent_grid:
        k = min(nblocks, math.floor(q * nblocks / 100 + 1e-9))
        if q >= 100:
            k = nblocks
        k = max(k, prev_k)
        boundary = ordered[k - 1].solvar if k >= 1 else 0.0
        slice_pop = int(cum_pop[k - 1] - (cum_pop[prev_k - 1] if prev_k >= 1 else 0)) if k >= 1 else 0
        cpop = int(cum_pop[k - 1]) if k >= 1 else 0
        csv_ = 100.0 * cum_d[k - 1] / cpop if k >= 1 and cpop > 0 else 0.0
        rows.append(
            CumSolvarRow(
                percentile=float(q),
                solvar=boundary,
                max_solvar=min(2.0 * boundary, 100.0),
                population=slice_pop,
                cum_population=cpop,
                cum_solvar=csv_,
                max_cum_solvar=min(2.0 * csv_, 100.0),
            )
        )
        prev_k = k
    return CumSolvarTable(rows=tuple(rows), order=tuple(r.block for r in ordered))


def write_solvar_csv(results: list[SolvarResult], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOLVAR_CSV_HEADER)
        for r in results:
            w.writerow(
                [r.block, r.population, r.dstar, f"{r.solvar:.4f}", f"{r.max_solvar:.4f}", r.status]
            )


def read_solvar_csv(path: str) -> list[SolvarResult]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SOLVAR_CSV_HEADER:
            raise SolvarError(f"{path}: bad header {header!r}")
        for row in reader:
            out.append(
                SolvarResult(
                    block=row[0],
                    population=int(row[1]),
                    dstar=int(row[2]),
                    solvar=float(row[3]),
                    max_solvar=float(row[4]),
                    status=row[5],
                )
            )
    return out


def write_cumsolvar_csv(table: CumSolvarTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CUMSOLVAR_CSV_HEADER)
        for r in table.rows:
            w.writerow(
                [
                    f"{r.percentile:g}", f"{r.solvar:.4f}", f"{r.max_solvar:.4f}",
                    r.population, r.cum_population,
                    f"{r.cum_solvar:.4f}", f"{r.max_cum_solvar:.4f}",
                ]
            )
