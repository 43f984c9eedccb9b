"""Disclosure-limitation defenses: household swapping, a noise-injection
analog of a modern protection system, and cell suppression.

Swapping exchanges the block geocodes of paired households (size-matched
within a geographic scope) and leaves every other field alone, so
geography-free marginals are invariant.  The noise defense perturbs two
per-block query families - the sex-by-agebin linking frame and the
race-ethnicity composition - with independent integer noise, repairs
nonnegativity and the block-total invariant by proportional controlled
rounding, then expands back to microdata with the two families coupled
only through the block, which is what collapses individual-level
inference to the block-distribution level.  Suppression withholds cells
instead of changing them: small positive counts (primary rule) and all
tables whose universe is small (whole-table rule) are replaced by a
marker the tabulation layer understands.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .geography import GeoUniverse
from .population import PersonRecord
from .schema import ALL_RACES, BIN38, ETHS, SEXES, inventory
from .tabulation import SUPPRESSED, TableBundle, tabulate

SUPPRESSION_CSV_HEADER = (
    "table", "geo_level", "cells_total", "cells_suppressed", "tables_suppressed"
)


class DefenseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Household swapping


@dataclass(frozen=True)
class SwapConfig:
    rate: float
    scope: str = "tract"            # "tract" | "county" | "state"
    rule: str = "uniform"           # "uniform" | "target_unique"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise DefenseError(f"swap rate must be in [0, 1], got {self.rate}")
        if self.scope not in ("tract", "county", "state"):
            raise DefenseError(f"unknown swap scope {self.scope!r}")
        if self.rule not in ("uniform", "target_unique"):
            raise DefenseError(f"unknown swap rule {self.rule!r}")


@dataclass(frozen=True)
class SwapReport:
    households: int
    requested_pairs: int
    candidate_pairs: int
    made_pairs: int
    unpaired_skipped: int
    persons_moved: int


def _scope_key(block: str, scope: str) -> str:
    if scope == "tract":
        return block[:11]
    if scope == "county":
        return block[:5]
    return block[:2]


def swap_defense(
    pop: list[PersonRecord], cfg: SwapConfig
) -> tuple[list[PersonRecord], SwapReport]:
    """Relocate rate * |households| households by exchanging block
    geocodes between round(rate * |households| / 2) pairs.

    Pairs are matched on household size within the configured scope and
    never join two households from the same block.  Households that
    cannot be paired are skipped and counted.  The target_unique rule
    spends the pair budget on households containing a person who is
    unique on (block, sex, agebin) first.
    """
    by_hid: dict[int, list[int]] = defaultdict(list)
    for i, r in enumerate(pop):
        if r.hid is None:
            raise DefenseError("swap defense needs household ids on every record")
        by_hid[r.hid].append(i)
    hids = sorted(by_hid)
    blocks = {}
    for h in hids:
        hb = {pop[i].block for i in by_hid[h]}
        if len(hb) != 1:
            raise DefenseError(f"household {h} spans blocks {sorted(hb)}")
        blocks[h] = hb.pop()

    n_households = len(hids)
    # rate is the fraction of households relocated; each pair moves two.
    requested = int(round(cfg.rate * n_households / 2.0))

    rng = np.random.default_rng(cfg.seed)
    groups: dict[tuple[str, int], list[int]] = defaultdict(list)
    for h in hids:
        key = (_scope_key(blocks[h], cfg.scope), len(by_hid[h]))
        groups[key].append(h)

    candidates: list[tuple[int, int]] = []
    unpaired = 0
    for key in sorted(groups):
        queue = list(groups[key])
        order = rng.permutation(len(queue))
        queue = [queue[i] for i in order]
        while len(queue) >= 2:
            a = queue.pop(0)
            partner = None
            for j, b in enumerate(queue):
                if blocks[b] != blocks[a]:
                    partner = j
                    break
            if partner is None:
                # everything left shares one block; nothing here can pair
                unpaired += 1 + len(queue)
                queue = []
                break
            b = queue.pop(partner)
            candidates.append((a, b))
        unpaired += len(queue)

    if cfg.rule == "target_unique":
        frame = Counter((r.block, r.sex, BIN38.bin_of(r.age)) for r in pop)

        def has_unique(h: int) -> bool:
            return any(
                frame[(pop[i].block, pop[i].sex, BIN38.bin_of(pop[i].age))] == 1
                for i in by_hid[h]
            )

        flags = [has_unique(a) or has_unique(b) for a, b in candidates]
        perm = rng.permutation(len(candidates))
        ranked = sorted(range(len(candidates)), key=lambda i: (not flags[i], perm[i]))
        candidates = [candidates[i] for i in ranked]
    else:
        perm = rng.permutation(len(candidates))
        candidates = [candidates[i] for i in perm]

    selected = candidates[: min(requested, len(candidates))]

    out = list(pop)
    moved = 0
    for a, b in selected:
        ba, bb = blocks[a], blocks[b]
        for i in by_hid[a]:
            out[i] = replace(out[i], block=bb)
            moved += 1
        for i in by_hid[b]:
            out[i] = replace(out[i], block=ba)
            moved += 1
    report = SwapReport(
        households=n_households,
        requested_pairs=requested,
        candidate_pairs=len(candidates),
        made_pairs=len(selected),
        unpaired_skipped=unpaired,
        persons_moved=moved,
    )
    return out, report


# ---------------------------------------------------------------------------
# Noise analog


@dataclass(frozen=True)
class NoiseConfig:
    family: str = "two_sided_geometric"     # or "discrete_gauss"
    frame_scale: float = 1.0                # linking-frame (sex x agebin) cells
    cell_scale: float = 1.0                 # race-ethnicity composition cells
    invariants: tuple[str, ...] = ("block_total",)

    def __post_init__(self):
        if self.family not in ("two_sided_geometric", "discrete_gauss"):
            raise DefenseError(f"unknown noise family {self.family!r}")
        if self.frame_scale < 0 or self.cell_scale < 0:
            raise DefenseError("noise scales must be nonnegative")
        if tuple(self.invariants) != ("block_total",):
            raise DefenseError("only the block_total invariant is supported")


def _integer_noise(rng: np.random.Generator, family: str, scale: float, size: int) -> np.ndarray:
    if scale == 0:
        return np.zeros(size, dtype=np.int64)
    if family == "two_sided_geometric":
        p = 1.0 / (1.0 + scale)
        g1 = rng.geometric(p, size=size) - 1
        g2 = rng.geometric(p, size=size) - 1
        return (g1 - g2).astype(np.int64)
    return np.round(rng.normal(0.0, scale, size=size)).astype(np.int64)


def _project_total(values: np.ndarray, total: int) -> np.ndarray:
    """Clip negatives, then proportionally scale and controlled-round so
    the vector sums to ``total``.  Largest remainders win the leftover
    units; ties fall to the lowest index."""
    v = np.maximum(values, 0).astype(float)
    s = v.sum()
    if total == 0:
        return np.zeros_like(values, dtype=np.int64)
    if s == 0:
        # noise wiped everything; fall back to an even spread over cell 0
        out = np.zeros(values.size, dtype=np.int64)
        out[0] = total
        return out
    scaled = v * (total / s)
    base = np.floor(scaled).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        rem = scaled - base
        order = np.lexsort((np.arange(rem.size), -rem))
        base[order[:short]] += 1
    return base


def noise_defense(
    pop: list[PersonRecord],
    universe: GeoUniverse,
    cfg: NoiseConfig,
    seed: int,
) -> tuple[list[PersonRecord], TableBundle]:
    """Protected microdata plus its tabulation.

    Per block, the (sex, agebin) frame histogram and the (race,
    ethnicity) composition histogram each receive independent integer
    noise, a nonnegativity clip, and proportional controlled rounding
    back to the block's exact total.  Expansion rebuilds persons by
    pairing frame slots with composition values in a seeded shuffle, so
    any association between a person's linking features and their race
    and ethnicity survives only through the block-level distributions.
    Ages reuse the block's true ages within each frame cell where
    counts allow.  A block whose two noised histograms both come back
    unchanged keeps its source records, which makes zero noise the
    identity.
    """
    n_frame = 2 * len(BIN38.bins)
    comp_cells = [(race, eth) for race in sorted(ALL_RACES) for eth in ETHS]
    comp_index = {c: i for i, c in enumerate(comp_cells)}
    frame_index = {}
    k = 0
    for si in range(2):
        for b in range(len(BIN38.bins)):
            frame_index[(si, b)] = k
            k += 1

    by_block: dict[str, list[PersonRecord]] = defaultdict(list)
    for r in pop:
        by_block[r.block].append(r)

    rng = np.random.default_rng(seed)
    protected: list[PersonRecord] = []
    for block in universe.blocks:
        members = by_block.get(block, [])
        n = len(members)
        frame = np.zeros(n_frame, dtype=np.int64)
        comp = np.zeros(len(comp_cells), dtype=np.int64)
        ages_by_cell: dict[int, list[int]] = defaultdict(list)
        for r in members:
            si = 0 if r.sex == "M" else 1
            fi = frame_index[(si, BIN38.bin_of(r.age))]
            frame[fi] += 1
            comp[comp_index[(r.race, r.eth)]] += 1
            ages_by_cell[fi].append(r.age)

        noised_frame = frame + _integer_noise(rng, cfg.family, cfg.frame_scale, n_frame)
        noised_comp = comp + _integer_noise(rng, cfg.family, cfg.cell_scale, len(comp_cells))
        t = _project_total(noised_frame, n)
        q = _project_total(noised_comp, n)

        if np.array_equal(t, frame) and np.array_equal(q, comp):
            protected.extend(members)
            continue

        # frame slots in deterministic cell order, ages from the block's
        # own records where the cell still has them
        slots: list[tuple[str, int]] = []
        for (si, b), fi in sorted(frame_index.items(), key=lambda kv: kv[1]):
            cnt = int(t[fi])
            if cnt == 0:
                continue
            have = sorted(ages_by_cell.get(fi, []))
            lo = BIN38.bins[b][0]
            for j in range(cnt):
                age = have[j] if j < len(have) else lo
                slots.append((SEXES[si], age))
        values: list[tuple[int, str]] = []
        for ci, cell in enumerate(comp_cells):
            values.extend([cell] * int(q[ci]))
        order = rng.permutation(len(values))
        values = [values[i] for i in order]
        for (sex, age), (race, eth) in zip(slots, values):
            protected.append(
                PersonRecord(pid=None, hid=None, block=block, sex=sex,
                             age=age, race=race, eth=eth)
            )

    bundle = tabulate(protected, universe)
    return protected, bundle


# ---------------------------------------------------------------------------
# Suppression


@dataclass(frozen=True)
class SuppressConfig:
    threshold: int = 3

    def __post_init__(self):
        if self.threshold < 2:
            raise DefenseError("suppression threshold must be at least 2")


@dataclass
class SuppressionReport:
    cells_total: Counter = field(default_factory=Counter)
    cells_suppressed: Counter = field(default_factory=Counter)
    tables_suppressed: Counter = field(default_factory=Counter)

    def rows(self) -> list[tuple[str, str, int, int, int]]:
        inv = inventory()
        out = []
        for name in inv.order:
            key = (name, inv[name].level)
            out.append(
                (
                    name,
                    inv[name].level,
                    self.cells_total[key],
                    self.cells_suppressed[key],
                    self.tables_suppressed[key],
                )
            )
        return out

    def suppressed_table_fraction(self, level: str) -> float:
        inv = inventory()
        n_tables = 0
        n_supp = 0
        for (name, lv), cells in self.cells_total.items():
            if lv != level:
                continue
            n_tables += cells // inv[name].n_cells
            n_supp += self.tables_suppressed[(name, lv)]
        return n_supp / n_tables if n_tables else 0.0


def _universe_count(bundle: TableBundle, geo: str, name: str) -> int | None:
    """The table's universe size: its own total cell when it has one,
    otherwise the geography's population table."""
    inv = inventory()
    q = inv[name]
    if not q.tally:
        return int(bundle.get(geo, name)[q.total_index])
    if bundle.has(geo, "P1"):
        return int(bundle.get(geo, "P1")[0])
    return None


def suppress_defense(
    bundle: TableBundle, cfg: SuppressConfig
) -> tuple[TableBundle, SuppressionReport]:
    """Apply primary suppression (cells with 1 <= count < t withheld) and
    whole-table suppression (tables whose universe count is 1 <= u < t
    withheld entirely).  Unsuppressed values pass through untouched."""
    t = cfg.threshold
    inv = inventory()
    out = bundle.copy()
    report = SuppressionReport()
    for (geo, name), counts in sorted(bundle.counts.items()):
        level = inv[name].level
        key = (name, level)
        report.cells_total[key] += counts.size
        u = _universe_count(bundle, geo, name)
        if u is not None and 1 <= u < t:
            out.counts[(geo, name)] = np.full(counts.size, SUPPRESSED, dtype=np.int64)
            report.tables_suppressed[key] += 1
            report.cells_suppressed[key] += counts.size
            continue
        masked = counts.copy()
        prim = (counts >= 1) & (counts < t)
        if prim.any():
            masked[prim] = SUPPRESSED
            report.cells_suppressed[key] += int(prim.sum())
            out.counts[(geo, name)] = masked
    return out, report


def write_suppression_csv(report: SuppressionReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUPPRESSION_CSV_HEADER)
        for row in report.rows():
            w.writerow(row)
