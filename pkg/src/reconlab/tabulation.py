"""Tabulation of person records into published table bundles.

A TableBundle maps (geography, table-name, cell-index) to a count.
Block-level tables key on 15-digit block geocodes, tract-level tables on
11-digit tract prefixes.  Zero-population geographies still publish
all-zero tables.  Suppressed cells carry a distinct marker (they are not
zeros); the serialized form writes them as ``S``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .geography import GeoUniverse, tract_of
from .population import PersonRecord
from .schema import (
    BIN23,
    BIN38,
    ETH_INDEX,
    GRID_SINGLE,
    SCHEMA_VERSION,
    SEXES,
    SEX_INDEX,
    inventory,
)

SUPPRESSED = -1  # marker value; real counts are nonnegative

BUNDLE_HEADER = ("geocode", "table", "cell_index", "count")


class TabulationError(ValueError):
    """Base for tabulation and bundle-format failures."""


class InconsistentTablesError(TabulationError):
    """Published cells contradict each other (e.g. negative derived count)."""


class MissingTableError(TabulationError):
    """A required table or cell is absent or suppressed."""


@dataclass
class TableBundle:
    """Published counts for one universe.

    ``counts`` maps (geocode, table) to an int64 array indexed by cell.
    ``blocks`` and ``tracts`` fix the canonical geography order.
    """

    blocks: tuple[str, ...]
    tracts: tuple[str, ...]
    counts: dict[tuple[str, str], np.ndarray]
    schema_version: str = SCHEMA_VERSION
    block_tables: tuple[str, ...] = field(default_factory=tuple)
    tract_tables: tuple[str, ...] = field(default_factory=tuple)

    def get(self, geocode: str, table: str) -> np.ndarray:
        try:
            return self.counts[(geocode, table)]
        except KeyError:
            raise MissingTableError(f"no table {table} for geography {geocode}") from None

    def has(self, geocode: str, table: str) -> bool:
        return (geocode, table) in self.counts

    def __getitem__(self, key: tuple[str, str, int]) -> int:
        geocode, table, cell = key
        return int(self.get(geocode, table)[cell])

    def cell_available(self, geocode: str, table: str, cell: int) -> bool:
        return self.has(geocode, table) and int(self.get(geocode, table)[cell]) != SUPPRESSED

    def copy(self) -> "TableBundle":
        return TableBundle(
            blocks=self.blocks,
            tracts=self.tracts,
            counts={k: v.copy() for k, v in self.counts.items()},
            schema_version=self.schema_version,
            block_tables=self.block_tables,
            tract_tables=self.tract_tables,
        )


def flat_single_index(records: list[PersonRecord]) -> np.ndarray:
    """Flattened single-year-grid index for each record."""
    n = len(records)
    out = np.empty(n, dtype=np.int64)
    for i, r in enumerate(records):
        out[i] = GRID_SINGLE.flat(SEX_INDEX[r.sex], r.age, r.race, ETH_INDEX[r.eth])
    return out


def tabulate(
    pop: list[PersonRecord],
    universe: GeoUniverse,
    tables: tuple[str, ...] | None = None,
) -> TableBundle:
    """Tabulate records into all (or the named subset of) published tables.

    Every universe geography gets a row set, zero-filled when empty.
    Records in blocks outside the universe are an error.
    """
    inv = inventory()
    if tables is None:
        tables = inv.order
    block_names = tuple(n for n in tables if inv[n].level == "block")
    tract_names = tuple(n for n in tables if inv[n].level == "tract")

    block_index = {b: i for i, b in enumerate(universe.blocks)}
    n_blocks = len(universe.blocks)

    rows = np.empty(len(pop), dtype=np.int64)
    cols = np.empty(len(pop), dtype=np.int64)
    for i, r in enumerate(pop):
        bi = block_index.get(r.block)
        if bi is None:
            raise TabulationError(f"record in block {r.block} outside the universe")
        cols[i] = bi
    rows[:] = flat_single_index(pop)
    hist = sparse.coo_matrix(
        (np.ones(len(pop), dtype=np.int64), (rows, cols)),
        shape=(GRID_SINGLE.size, n_blocks),
    ).tocsc()

    counts: dict[tuple[str, str], np.ndarray] = {}
    if block_names:
        m, slices = inv.stacked(block_names, GRID_SINGLE)
        table_counts = np.asarray((m @ hist).todense(), dtype=np.int64)
        for name in block_names:
            sl = slices[name]
            for b, bi in block_index.items():
                counts[(b, name)] = table_counts[sl, bi].copy()

    if tract_names:
        member = sparse.coo_matrix(
            (
                np.ones(n_blocks, dtype=np.int64),
                (
                    np.arange(n_blocks),
                    [universe.tracts.index(tract_of(b)) for b in universe.blocks],
                ),
            ),
            shape=(n_blocks, len(universe.tracts)),
        ).tocsc()
        tract_hist = hist @ member
        m, slices = inv.stacked(tract_names, GRID_SINGLE)
        table_counts = np.asarray((m @ tract_hist).todense(), dtype=np.int64)
        for name in tract_names:
            sl = slices[name]
            for ti, t in enumerate(universe.tracts):
                counts[(t, name)] = table_counts[sl, ti].copy()

    return TableBundle(
        blocks=universe.blocks,
        tracts=universe.tracts,
        counts=counts,
        block_tables=block_names,
        tract_tables=tract_names,
    )


def count_statistics(bundle: TableBundle, positive_only: bool = False) -> int:
    """Number of published (non-suppressed) cells in the bundle.

    With ``positive_only`` the count is restricted to geographies whose
    available cells show any positive count.
    """
    geographies: dict[str, list[np.ndarray]] = {}
    for (geo, _table), arr in bundle.counts.items():
        geographies.setdefault(geo, []).append(arr)
    total = 0
    for geo, arrays in geographies.items():
        if positive_only and not any((a > 0).any() for a in arrays):
            continue
        total += sum(int((a != SUPPRESSED).sum()) for a in arrays)
    return total


# ---------------------------------------------------------------------------
# Saturated sex-by-binned-age frame

# P12 cell layout: 0 total, 1 male subtotal, 2..24 male BIN23 bins,
# 25 female subtotal, 26..48 female bins.  P14: 0 total, 1 male subtotal,
# 2..21 male single years 0..19, 22 female subtotal, 23..42 female years.
_P12_BASE = {0: 1, 1: 25}
_P14_BASE = {0: 1, 1: 22}
# BIN23 bin index -> BIN38 bin index for bins at or above age 20
_B23_TO_B38 = {5: 20, 6: 21}
_B23_TO_B38.update({7 + i: 22 + i for i in range(16)})
_B23_UNDER20 = (0, 1, 2, 3, 4)  # 0-4, 5-9, 10-14, 15-17, 18-19


def frame_counts(bundle: TableBundle, block: str) -> np.ndarray:
    """Exact (sex, BIN38 bin) counts for one block, derived from P12 + P14.

    Single years below 20 come from P14; ages 20 and 21 and every higher
    bin come from P12.  The P12 bins that P14 refines are reconciled
    against the P14 single years; any disagreement (equivalently, any
    negative derived remainder) raises InconsistentTablesError.  A
    suppressed cell in either table raises MissingTableError.
    """
    p12 = bundle.get(block, "P12")
    p14 = bundle.get(block, "P14")
    if (p12 == SUPPRESSED).any() or (p14 == SUPPRESSED).any():
        raise MissingTableError(f"block {block}: P12/P14 cells suppressed, frame unavailable")
    out = np.zeros((2, BIN38.n), dtype=np.int64)
    for s in (0, 1):
        for y in range(20):
            out[s, y] = p14[_P14_BASE[s] + 1 + y]
        for b23 in range(BIN23.n):
            v = p12[_P12_BASE[s] + 1 + b23]
            if b23 in _B23_UNDER20:
                lo, hi = BIN23.bins[b23]
                derived = int(v) - int(out[s, lo : hi + 1].sum())
                if derived != 0:
                    raise InconsistentTablesError(
                        f"block {block}: P12 {SEXES[s]} bin {BIN23.label(b23)} is {int(v)} but "
                        f"P14 single years sum to {int(out[s, lo:hi + 1].sum())}"
                    )
            else:
                out[s, _B23_TO_B38[b23]] = v
    if (out < 0).any():
        raise InconsistentTablesError(f"block {block}: negative derived frame count")
    return out


def expand_sex_agebin_frame(bundle: TableBundle) -> list[tuple[str, str, int]]:
    """One (block, sex, BIN38 bin) row per person, for every block.

    Rows are ordered by block (bundle order), then sex, then bin.
    """
    rows: list[tuple[str, str, int]] = []
    for block in bundle.blocks:
        arr = frame_counts(bundle, block)
        for s in (0, 1):
            for b in range(BIN38.n):
                rows.extend([(block, SEXES[s], b)] * int(arr[s, b]))
    return rows


# ---------------------------------------------------------------------------
# Serialization


def write_bundle(bundle: TableBundle, path: str) -> None:
    """Write ``geocode,table,cell_index,count`` rows sorted by key."""
    keys = sorted(bundle.counts)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BUNDLE_HEADER)
        for geo, table in keys:
            arr = bundle.counts[(geo, table)]
            for i, v in enumerate(arr.tolist()):
                writer.writerow([geo, table, i, "S" if v == SUPPRESSED else v])


def read_bundle(path: str) -> TableBundle:
    """Read a bundle file back; every present (geography, table) must be complete."""
    inv = inventory()
    cells: dict[tuple[str, str], dict[int, int]] = {}
    order: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != BUNDLE_HEADER:
            raise TabulationError(f"{path}: header must be {','.join(BUNDLE_HEADER)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise TabulationError(f"{path}:{lineno}: expected 4 fields")
            geo, table, idx_s, count_s = row
            try:
                t = inv[table]
            except Exception:
                raise TabulationError(f"{path}:{lineno}: unknown table {table!r}") from None
            try:
                idx = int(idx_s)
            except ValueError:
                raise TabulationError(f"{path}:{lineno}: bad cell index {idx_s!r}") from None
            if not 0 <= idx < t.n_cells:
                raise TabulationError(f"{path}:{lineno}: cell index {idx} out of range for {table}")
            if count_s == "S":
                v = SUPPRESSED
            else:
                try:
                    v = int(count_s)
                except ValueError:
                    raise TabulationError(f"{path}:{lineno}: bad count {count_s!r}") from None
                if v < 0:
                    raise TabulationError(f"{path}:{lineno}: negative count")
            key = (geo, table)
            if key not in cells:
                cells[key] = {}
                order.append(key)
            if idx in cells[key]:
                raise TabulationError(f"{path}:{lineno}: duplicate cell ({geo},{table},{idx})")
            cells[key][idx] = v

    counts: dict[tuple[str, str], np.ndarray] = {}
    blocks: list[str] = []
    tracts: list[str] = []
    block_tables: list[str] = []
    tract_tables: list[str] = []
    for geo, table in order:
        t = inv[table]
        got = cells[(geo, table)]
        if len(got) != t.n_cells:
            raise TabulationError(
                f"{path}: table {table} for {geo} has {len(got)} cells, expected {t.n_cells}"
            )
        counts[(geo, table)] = np.array([got[i] for i in range(t.n_cells)], dtype=np.int64)
        if t.level == "block":
            if geo not in blocks:
                blocks.append(geo)
            if table not in block_tables:
                block_tables.append(table)
        else:
            if geo not in tracts:
                tracts.append(geo)
            if table not in tract_tables:
                tract_tables.append(table)
    return TableBundle(
        blocks=tuple(sorted(blocks)),
        tracts=tuple(sorted(tracts)),
        counts=counts,
        block_tables=tuple(block_tables),
        tract_tables=tuple(tract_tables),
    )


def write_schema_sidecar(path: str) -> None:
    """Write the human-readable schema DSL describing every table's cells."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(inventory().dsl())
