"""Attribute encodings, age schemas, and the published table inventory.

The cell space for one geography is the product
sex (2) x single-year age (116) x race category (63) x ethnicity (2).
Race categories are the nonempty subsets of the six major groups
White, Black, AIAN, Asian, NHPI, SOR, encoded as a 6-bit mask in that
bit order and serialized as a 6-character flag string ("W.....",
"WB....", ...).

Every published table is a list of cells; each cell is a conjunction
predicate over the four axes.  Cells therefore become 0/1 rows of a
sparse matrix over a flattened cell grid, which serves tabulation
(count = row . histogram) and reconstruction (row . x = published
count) alike.  Three grids exist: single-year ages, the 38-bin block
schema, and the 103-category tract schema.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

SCHEMA_VERSION = "sf1lab-1"

SEXES = ("M", "F")
ETHS = ("H", "N")
RACE_LETTERS = "WBAINS"
RACE_GROUPS = ("White", "Black", "AIAN", "Asian", "NHPI", "SOR")
N_RACE = 63
MAX_AGE = 115
N_AGE = MAX_AGE + 1

RACE_BIT = {letter: 1 << i for i, letter in enumerate(RACE_LETTERS)}
ALONE = dict(RACE_BIT)  # alone category mask == the group's bit
TWO_OR_MORE = frozenset(m for m in range(1, 64) if bin(m).count("1") >= 2)
ALL_RACES = frozenset(range(1, 64))

SEX_INDEX = {s: i for i, s in enumerate(SEXES)}
ETH_INDEX = {e: i for i, e in enumerate(ETHS)}


class SchemaError(ValueError):
    """Raised for invalid encodings or inexpressible cell predicates."""


def race_flags(mask: int) -> str:
    """Serialize a race mask as a 6-character flag string."""
    if not 1 <= mask <= 63:
        raise SchemaError(f"race mask must be in 1..63, got {mask}")
    return "".join(RACE_LETTERS[i] if mask >> i & 1 else "." for i in range(6))


def parse_race_flags(text: str) -> int:
    """Parse a flag string like ``WB....`` back into a mask."""
    if len(text) != 6:
        raise SchemaError(f"race flags must have 6 characters, got {text!r}")
    mask = 0
    for i, ch in enumerate(text):
        if ch == RACE_LETTERS[i]:
            mask |= 1 << i
        elif ch != ".":
            raise SchemaError(f"race flags position {i} must be {RACE_LETTERS[i]!r} or '.', got {text!r}")
    if mask == 0:
        raise SchemaError("race flags must name at least one group")
    return mask


def race_mask(letters: str) -> int:
    """Mask for a combination named by its letters, e.g. ``WB``."""
    mask = 0
    for ch in letters:
        if ch not in RACE_BIT:
            raise SchemaError(f"unknown race letter {ch!r}")
        mask |= RACE_BIT[ch]
    if mask == 0:
        raise SchemaError("race combination must name at least one group")
    return mask


def n_groups(mask: int) -> int:
    return bin(mask).count("1")


# ---------------------------------------------------------------------------
# Age schemas


@dataclass(frozen=True)
class AgeSchema:
    """An ordered partition of single-year ages into bins."""

    name: str
    bins: tuple[tuple[int, int], ...]  # inclusive (lo, hi) spans

    def __post_init__(self) -> None:
        prev = -1
        for lo, hi in self.bins:
            if lo != prev + 1 or hi < lo:
                raise SchemaError(f"{self.name}: bins must be contiguous ascending spans")
            prev = hi

    @property
    def n(self) -> int:
        return len(self.bins)

    @property
    def span(self) -> tuple[int, int]:
        return self.bins[0][0], self.bins[-1][1]

    def bin_of(self, age: int) -> int:
        lo, hi = self.span
        if not lo <= age <= hi:
            raise SchemaError(f"{self.name}: age {age} outside {lo}..{hi}")
        return int(self._lookup()[age - lo])

    def _lookup(self) -> np.ndarray:
        return _schema_lookup(self)

    def label(self, i: int) -> str:
        lo, hi = self.bins[i]
        return str(lo) if lo == hi else f"{lo}_{hi}"

    def years(self, i: int) -> range:
        lo, hi = self.bins[i]
        return range(lo, hi + 1)

    def refines(self, coarser: "AgeSchema") -> bool:
        """True when every bin of ``coarser`` is a union of this schema's bins."""
        if self.span != coarser.span:
            return False
        edges = {lo for lo, _ in self.bins}
        return all(lo in edges for lo, _ in coarser.bins)


@lru_cache(maxsize=None)
def _schema_lookup(schema: AgeSchema) -> np.ndarray:
    lo0, hi0 = schema.span
    out = np.empty(hi0 - lo0 + 1, dtype=np.int32)
    for i, (lo, hi) in enumerate(schema.bins):
        out[lo - lo0 : hi - lo0 + 1] = i
    return out


def _spans(*parts: tuple[int, int] | int) -> tuple[tuple[int, int], ...]:
    out = []
    for p in parts:
        out.append((p, p) if isinstance(p, int) else p)
    return tuple(out)


_UPPER_BINS = _spans(
    (22, 24), (25, 29), (30, 34), (35, 39), (40, 44), (45, 49), (50, 54), (55, 59),
    (60, 61), (62, 64), (65, 66), (67, 69), (70, 74), (75, 79), (80, 84), (85, MAX_AGE),
)

BIN23 = AgeSchema(
    "BIN23",
    _spans((0, 4), (5, 9), (10, 14), (15, 17), (18, 19), 20, 21) + _UPPER_BINS,
)
BIN38 = AgeSchema("BIN38", _spans(*range(22)) + _UPPER_BINS)
TRACT103 = AgeSchema(
    "TRACT103",
    _spans(*range(100)) + _spans((100, 104), (105, 109), (110, MAX_AGE)),
)
SINGLE_0_19 = AgeSchema("SINGLE_0_19", _spans(*range(20)))

AGE_SCHEMAS = {s.name: s for s in (BIN23, BIN38, TRACT103, SINGLE_0_19)}


# ---------------------------------------------------------------------------
# Cell predicates and tables


@dataclass(frozen=True)
class CellPredicate:
    """Conjunction over the four axes; ``None`` leaves an axis unrestricted."""

    sexes: frozenset[int] | None = None
    ages: frozenset[int] | None = None
    races: frozenset[int] | None = None
    eths: frozenset[int] | None = None

    def conj(self, other: "CellPredicate") -> "CellPredicate":
        def meet(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a & b

        return CellPredicate(
            meet(self.sexes, other.sexes),
            meet(self.ages, other.ages),
            meet(self.races, other.races),
            meet(self.eths, other.eths),
        )

    def matches(self, sex: int, age: int, race: int, eth: int) -> bool:
        return (
            (self.sexes is None or sex in self.sexes)
            and (self.ages is None or age in self.ages)
            and (self.races is None or race in self.races)
            and (self.eths is None or eth in self.eths)
        )


ALL = CellPredicate()


def _ages(lo: int, hi: int) -> frozenset[int]:
    return frozenset(range(lo, hi + 1))


@dataclass(frozen=True)
class TableCell:
    index: int
    label: str
    pred: CellPredicate          # effective predicate, universe included
    children: tuple[int, ...]    # indices of direct children when subtotal
    desc: str                    # human-readable predicate text (without universe)


@dataclass(frozen=True)
class CountingQuery:
    """One published table: a universe plus an ordered cell list."""

    name: str
    level: str                   # "block" or "tract"
    universe: CellPredicate
    universe_desc: str
    cells: tuple[TableCell, ...]
    tally: bool = False          # True when cells may overlap (race tallies)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def total_index(self) -> int | None:
        """Index of the universe-total cell, if the table has one."""
        return 0 if not self.tally else None


def _pred_desc(parts: list[str]) -> str:
    return " && ".join(parts) if parts else "all"


def _race_desc(races: frozenset[int]) -> str:
    if races == TWO_OR_MORE:
        return "race==two_or_more"
    # set of masks containing one group: a tally
    for letter, bit in RACE_BIT.items():
        if races == frozenset(m for m in range(1, 64) if m & bit):
            return f"race has {letter}"
    return "race in {" + ",".join(race_flags(m) for m in sorted(races)) + "}"


def _describe(pred: CellPredicate) -> str:
    parts: list[str] = []
    if pred.sexes is not None and len(pred.sexes) == 1:
        parts.append(f"sex=={SEXES[min(pred.sexes)]}")
    if pred.ages is not None:
        ages = sorted(pred.ages)
        lo, hi = ages[0], ages[-1]
        if len(ages) == hi - lo + 1:
            parts.append(f"age=={lo}" if lo == hi else f"age in {lo}..{hi}")
        else:  # pragma: no cover - no such cell today
            parts.append("age in {" + ",".join(map(str, ages)) + "}")
    if pred.races is not None:
        if len(pred.races) == 1:
            (m,) = pred.races
            if n_groups(m) == 1:
                letter = RACE_LETTERS[m.bit_length() - 1]
                parts.append(f"race=={letter}_alone")
            else:
                parts.append(f"race=={race_flags(m)}")
        else:
            parts.append(_race_desc(pred.races))
    if pred.eths is not None and len(pred.eths) == 1:
        parts.append(f"eth=={ETHS[min(pred.eths)]}")
    return _pred_desc(parts)


def _cell(index: int, label: str, universe: CellPredicate, local: CellPredicate,
          children: tuple[int, ...] = ()) -> TableCell:
    return TableCell(index, label, universe.conj(local), children, _describe(local))


def _sex_by_age(name: str, level: str, universe: CellPredicate, universe_desc: str,
                schema: AgeSchema) -> CountingQuery:
    cells: list[TableCell] = []
    n = schema.n
    total_children = (1, 2 + n)
    cells.append(_cell(0, "total", universe, ALL, total_children))
    for si, sex in enumerate(SEXES):
        base = 1 + si * (n + 1)
        sub_children = tuple(range(base + 1, base + 1 + n))
        cells.append(_cell(base, sex, universe, CellPredicate(sexes=frozenset({si})), sub_children))
        for bi in range(n):
            lo, hi = schema.bins[bi]
            local = CellPredicate(sexes=frozenset({si}), ages=_ages(lo, hi))
            cells.append(_cell(base + 1 + bi, f"{sex}_{schema.label(bi)}", universe, local))
    return CountingQuery(name, level, universe, universe_desc, tuple(cells))


def _race63(name: str, level: str, universe: CellPredicate, universe_desc: str) -> CountingQuery:
    cells = [_cell(0, "total", universe, ALL, tuple(range(1, 64)))]
    for m in range(1, 64):
        local = CellPredicate(races=frozenset({m}))
        cells.append(_cell(m, race_flags(m), universe, local))
    return CountingQuery(name, level, universe, universe_desc, tuple(cells))


def _eth_by_race63(name: str, level: str, universe: CellPredicate, universe_desc: str) -> CountingQuery:
    cells = [
        _cell(0, "total", universe, ALL, (1, 2)),
        _cell(1, "H", universe, CellPredicate(eths=frozenset({ETH_INDEX["H"]}))),
        _cell(2, "N", universe, CellPredicate(eths=frozenset({ETH_INDEX["N"]})), tuple(range(3, 66))),
    ]
    for m in range(1, 64):
        local = CellPredicate(races=frozenset({m}), eths=frozenset({ETH_INDEX["N"]}))
        cells.append(_cell(2 + m, f"N_{race_flags(m)}", universe, local))
    return CountingQuery(name, level, universe, universe_desc, tuple(cells))


def _tally_set(letter: str) -> frozenset[int]:
    bit = RACE_BIT[letter]
    return frozenset(m for m in range(1, 64) if m & bit)


def _race_tallies(name: str, level: str) -> CountingQuery:
    # Tallies count a person once per group claimed, so cells overlap and
    # there is no total cell.
    cells = []
    for i, letter in enumerate(RACE_LETTERS):
        local = CellPredicate(races=_tally_set(letter))
        cells.append(_cell(i, f"tally_{letter}", ALL, local))
    return CountingQuery(name, level, ALL, "all", tuple(cells), tally=True)


def _eth_race_tallies(name: str, level: str) -> CountingQuery:
    cells = []
    idx = 0
    for eth in ETHS:
        for letter in RACE_LETTERS:
            local = CellPredicate(races=_tally_set(letter), eths=frozenset({ETH_INDEX[eth]}))
            cells.append(_cell(idx, f"tally_{eth}_{letter}", ALL, local))
            idx += 1
    return CountingQuery(name, level, ALL, "all", tuple(cells), tally=True)


def _iteration_universes() -> dict[str, tuple[CellPredicate, str]]:
    """Race/ethnicity universes for the iterated sex-by-age tables."""
    u: dict[str, tuple[CellPredicate, str]] = {}
    for suffix, letter in zip("ABCDEF", RACE_LETTERS):
        u[suffix] = (
            CellPredicate(races=frozenset({ALONE[letter]})),
            f"race=={letter}_alone",
        )
    u["G"] = (CellPredicate(races=TWO_OR_MORE), "race==two_or_more")
    u["H"] = (CellPredicate(eths=frozenset({ETH_INDEX["H"]})), "eth==H")
    nh = frozenset({ETH_INDEX["N"]})
    u["I"] = (
        CellPredicate(races=frozenset({ALONE["W"]}), eths=nh),
        "race==W_alone && eth==N",
    )
    # J..N iterate the remaining alone groups restricted to not-Hispanic;
    # O is two-or-more not-Hispanic.  Used by the tract panel only.
    for suffix, letter in zip("JKLMN", "BAINS"):
        u[suffix] = (
            CellPredicate(races=frozenset({ALONE[letter]}), eths=nh),
            f"race=={letter}_alone && eth==N",
        )
    u["O"] = (CellPredicate(races=TWO_OR_MORE, eths=nh), "race==two_or_more && eth==N")
    return u


ADULT = CellPredicate(ages=_ages(18, MAX_AGE))
UNDER20 = CellPredicate(ages=_ages(0, 19))


def _build_tables() -> dict[str, CountingQuery]:
    it = _iteration_universes()
    tables: dict[str, CountingQuery] = {}

    def add(q: CountingQuery) -> None:
        tables[q.name] = q

    add(CountingQuery("P1", "block", ALL, "all", (_cell(0, "total", ALL, ALL),)))
    add(_race_tallies("P6", "block"))
    add(_eth_race_tallies("P7", "block"))
    add(_race63("P8", "block", ALL, "all"))
    add(_eth_by_race63("P9", "block", ALL, "all"))
    add(_race63("P10", "block", ADULT, "age in 18..115"))
    add(_eth_by_race63("P11", "block", ADULT, "age in 18..115"))
    add(_sex_by_age("P12", "block", ALL, "all", BIN23))
    for suffix in "ABCDEFGHI":
        pred, desc = it[suffix]
        add(_sex_by_age(f"P12{suffix}", "block", pred, desc, BIN23))
    add(_sex_by_age("P14", "block", UNDER20, "age in 0..19", SINGLE_0_19))

    add(_sex_by_age("PCT12", "tract", ALL, "all", TRACT103))
    for suffix in "ABCDEFGHIJKLMNO":
        pred, desc = it[suffix]
        add(_sex_by_age(f"PCT12{suffix}", "tract", pred, desc, TRACT103))
    return tables


# ---------------------------------------------------------------------------
# Grids and matrices


@dataclass(frozen=True)
class Grid:
    """A flattened sex x age-category x race x ethnicity index space."""

    name: str
    age_schema: AgeSchema | None  # None means single-year ages 0..115

    @property
    def n_age(self) -> int:
        return N_AGE if self.age_schema is None else self.age_schema.n

    @property
    def size(self) -> int:
        return 2 * self.n_age * N_RACE * 2

    def flat(self, sex: int, agecat: int, race: int, eth: int) -> int:
        return ((sex * self.n_age + agecat) * N_RACE + (race - 1)) * 2 + eth

    def unflat(self, idx: int) -> tuple[int, int, int, int]:
        idx, eth = divmod(idx, 2)
        idx, race0 = divmod(idx, N_RACE)
        sex, agecat = divmod(idx, self.n_age)
        return sex, agecat, race0 + 1, eth

    def agecat_of(self, age: int) -> int:
        if self.age_schema is None:
            if not 0 <= age <= MAX_AGE:
                raise SchemaError(f"age {age} outside 0..{MAX_AGE}")
            return age
        return self.age_schema.bin_of(age)

    def cell_key(self, idx: int) -> str:
        """Stable text key for one grid position, used in LP exports."""
        sex, agecat, race, eth = self.unflat(idx)
        return f"{SEXES[sex]}{agecat:03d}r{race:02d}{ETHS[eth]}"

    def age_of_cat(self, agecat: int) -> int:
        """Representative (lowest) single year for an age category."""
        if self.age_schema is None:
            return agecat
        return self.age_schema.bins[agecat][0]


GRID_SINGLE = Grid("single", None)
GRID_B38 = Grid("b38", BIN38)
GRID_T103 = Grid("t103", TRACT103)
GRIDS = {g.name: g for g in (GRID_SINGLE, GRID_B38, GRID_T103)}


def _age_axis(pred_ages: frozenset[int] | None, grid: Grid, context: str) -> np.ndarray:
    n = grid.n_age
    keep = np.zeros(n, dtype=bool)
    if pred_ages is None:
        keep[:] = True
        return keep
    if grid.age_schema is None:
        keep[sorted(pred_ages)] = True
        return keep
    for bi in range(n):
        years = set(grid.age_schema.years(bi))
        if years <= pred_ages:
            keep[bi] = True
        elif years & pred_ages:
            raise SchemaError(
                f"{context}: age predicate not a union of {grid.age_schema.name} bins"
            )
    return keep


def _build_matrix(table: CountingQuery, grid: Grid) -> sparse.csr_matrix:
    rows: list[np.ndarray] = []
    indptr = [0]
    sex_all = np.ones(2, dtype=bool)
    race_all = np.ones(N_RACE, dtype=bool)
    eth_all = np.ones(2, dtype=bool)
    for cell in table.cells:
        p = cell.pred
        sex = sex_all if p.sexes is None else np.isin(np.arange(2), sorted(p.sexes))
        age = _age_axis(p.ages, grid, f"{table.name}[{cell.index}]")
        race = race_all if p.races is None else np.isin(np.arange(1, 64), sorted(p.races))
        eth = eth_all if p.eths is None else np.isin(np.arange(2), sorted(p.eths))
        mask = (
            sex[:, None, None, None]
            & age[None, :, None, None]
            & race[None, None, :, None]
            & eth[None, None, None, :]
        )
        idx = np.flatnonzero(mask.reshape(-1))
        rows.append(idx)
        indptr.append(indptr[-1] + idx.size)
    indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    data = np.ones(indices.size, dtype=np.int8)
    return sparse.csr_matrix(
        (data, indices, np.asarray(indptr)), shape=(table.n_cells, grid.size)
    )


class TableInventory:
    """All published tables plus cached constraint matrices per grid."""

    def __init__(self) -> None:
        self.tables = _build_tables()
        self.order = tuple(self.tables)
        self.block_tables = tuple(n for n in self.order if self.tables[n].level == "block")
        self.tract_tables = tuple(n for n in self.order if self.tables[n].level == "tract")
        self._matrices: dict[tuple[str, str], sparse.csr_matrix] = {}
        self._stacks: dict[tuple[tuple[str, ...], str], tuple[sparse.csr_matrix, dict[str, slice]]] = {}

    def __getitem__(self, name: str) -> CountingQuery:
        try:
            return self.tables[name]
        except KeyError:
            raise SchemaError(f"unknown table {name!r}") from None

    def matrix(self, name: str, grid: Grid) -> sparse.csr_matrix:
        key = (name, grid.name)
        if key not in self._matrices:
            self._matrices[key] = _build_matrix(self[name], grid)
        return self._matrices[key]

    def stacked(self, names: tuple[str, ...], grid: Grid) -> tuple[sparse.csr_matrix, dict[str, slice]]:
        """Vertically stacked matrix for several tables, with row slices."""
        key = (names, grid.name)
        if key not in self._stacks:
            mats = [self.matrix(n, grid) for n in names]
            slices: dict[str, slice] = {}
            at = 0
            for n, m in zip(names, mats):
                slices[n] = slice(at, at + m.shape[0])
                at += m.shape[0]
            self._stacks[key] = (sparse.vstack(mats, format="csr"), slices)
        return self._stacks[key]

    def cells_per_geography(self, level: str) -> int:
        names = self.block_tables if level == "block" else self.tract_tables
        return sum(self.tables[n].n_cells for n in names)

    def dsl(self) -> str:
        """Render the whole inventory in the sidecar schema DSL."""
        lines = [f"schema={SCHEMA_VERSION}"]
        for name in self.order:
            t = self.tables[name]
            lines.append(f"table={name}; level={t.level}; universe={t.universe_desc}"
                         + ("; tally" if t.tally else ""))
            for cell in t.cells:
                line = f"cell[{cell.index}]={cell.desc}"
                if cell.children:
                    line += "; children=" + "+".join(str(c) for c in cell.children)
                lines.append(line)
        return "\n".join(lines) + "\n"


@lru_cache(maxsize=1)
def inventory() -> TableInventory:
    return TableInventory()
