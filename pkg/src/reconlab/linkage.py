"""Record linkage: agreement, putative and confirmed matches, guessing
baselines, and stratified attack metrics.

All matching is block-local, exact on keys, and without replacement: a
record on either side is consumed by at most one match.  Every matcher
runs two passes, first on exact age and then on the 38-bin age category
for the residuals.  Within a key bucket candidates are consumed in
ascending stable input order, so results are deterministic.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .geography import GeoUniverse, block_group_of
from .population import AttackerRecord, PersonRecord
from .schema import ALL_RACES, BIN38, race_mask
from .tabulation import SUPPRESSED, TableBundle, expand_sex_agebin_frame

NATIONAL_MODAL_CELL = (race_mask("W"), "N")

SIZE_CLASSES = (
    ("1-9", 1, 9),
    ("10-49", 10, 49),
    ("50-99", 50, 99),
    ("100-249", 100, 249),
    ("250-499", 250, 499),
    ("500-999", 500, 999),
    ("1000+", 1000, None),
)

MODAL_CLASSES = ("all", "modal", "nonmodal")
SOLVAR_CLASSES = ("any", "zero_solvar", "zero_solvar_unique")

REID_CSV_HEADER = ("data", "attacker", "stratum", "population", "putative", "confirmed", "precision")
REID_LONG_CSV_HEADER = (
    "data", "attacker", "size_class", "modal_class", "solvar_class", "metric", "value"
)

UNDEFINED = "NA"


class LinkageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Generic two-pass matcher


def _consume(left_keys, right_keys, left_alive, right_alive):
    """Match alive right rows to alive left rows on equal keys, without
    replacement, consuming left candidates in ascending order.  Returns
    (pairs, left_alive', right_alive')."""
    buckets: dict[object, deque[int]] = defaultdict(deque)
    for i in left_alive:
        buckets[left_keys[i]].append(i)
    pairs = []
    right_rest = []
    for j in right_alive:
        q = buckets.get(right_keys[j])
        if q:
            pairs.append((q.popleft(), j))
        else:
            right_rest.append(j)
    left_rest = [i for q in buckets.values() for i in q]
    left_rest.sort()
    return pairs, left_rest, right_rest


@dataclass(frozen=True)
class AgreementResult:
    matched_exact: tuple[tuple[int, int], ...]
    matched_agebin: tuple[tuple[int, int], ...]
    unmatched_left: tuple[int, ...]
    unmatched_right: tuple[int, ...]

    @property
    def matched_total(self) -> int:
        return len(self.matched_exact) + len(self.matched_agebin)


def agreement_match(left: list[PersonRecord], right: list[PersonRecord]) -> AgreementResult:
    """Two-pass full-feature match: (block, sex, age, race, eth) exactly,
    then the residuals on (block, sex, agebin, race, eth)."""
    lk_age = [(r.block, r.sex, r.age, r.race, r.eth) for r in left]
    rk_age = [(r.block, r.sex, r.age, r.race, r.eth) for r in right]
    lk_bin = [(r.block, r.sex, BIN38.bin_of(r.age), r.race, r.eth) for r in left]
    rk_bin = [(r.block, r.sex, BIN38.bin_of(r.age), r.race, r.eth) for r in right]
    p1, l_rest, r_rest = _consume(lk_age, rk_age, range(len(left)), range(len(right)))
    p2, l_rest, r_rest = _consume(lk_bin, rk_bin, l_rest, r_rest)
    return AgreementResult(
        matched_exact=tuple(p1),
        matched_agebin=tuple(p2),
        unmatched_left=tuple(l_rest),
        unmatched_right=tuple(r_rest),
    )


@dataclass(frozen=True)
class PutativeRow:
    """One attacker row that found a reconstructed counterpart, carrying
    the race and ethnicity read off that counterpart."""
    attacker_index: int
    pid: int
    block: str
    sex: str
    age: int
    race: int
    eth: str
    matched_pass: str           # "age" or "agebin"


def putative_match(
    recon: list[PersonRecord], attacker: list[AttackerRecord]
) -> list[PutativeRow]:
    """Link attacker rows to reconstructed records on (block, sex, age),
    then residuals on (block, sex, agebin); ids play no part in the
    linkage.  Matched rows gain the reconstruction's race and ethnicity.
    """
    lk_age = [(r.block, r.sex, r.age) for r in recon]
    rk_age = [(a.block, a.sex, a.age) for a in attacker]
    lk_bin = [(r.block, r.sex, BIN38.bin_of(r.age)) for r in recon]
    rk_bin = [(a.block, a.sex, BIN38.bin_of(a.age)) for a in attacker]
    p1, l_rest, r_rest = _consume(lk_age, rk_age, range(len(recon)), range(len(attacker)))
    p2, _, _ = _consume(lk_bin, rk_bin, l_rest, r_rest)
    out = []
    for tag, pairs in (("age", p1), ("agebin", p2)):
        for li, ri in pairs:
            a = attacker[ri]
            r = recon[li]
            out.append(
                PutativeRow(
                    attacker_index=ri, pid=a.pid, block=a.block, sex=a.sex,
                    age=a.age, race=r.race, eth=r.eth, matched_pass=tag,
                )
            )
    out.sort(key=lambda p: p.attacker_index)
    return out


def confirm_match(
    putative: list[PutativeRow], truth: list[PersonRecord]
) -> list[PutativeRow]:
    """Keep the putative rows whose id-plus-key lookup lands on a truth
    record whose race and ethnicity equal the attached values exactly.

    Pass one requires exact age agreement with the truth record, pass
    two retries the residual on the age bin.  Truth records confirm at
    most one row each.
    """
    lk_age = [(t.pid, t.block, t.sex, t.age, t.race, t.eth) for t in truth]
    rk_age = [(p.pid, p.block, p.sex, p.age, p.race, p.eth) for p in putative]
    lk_bin = [(t.pid, t.block, t.sex, BIN38.bin_of(t.age), t.race, t.eth) for t in truth]
    rk_bin = [(p.pid, p.block, p.sex, BIN38.bin_of(p.age), p.race, p.eth) for p in putative]
    p1, l_rest, r_rest = _consume(lk_age, rk_age, range(len(truth)), range(len(putative)))
    p2, _, _ = _consume(lk_bin, rk_bin, l_rest, r_rest)
    confirmed_idx = sorted(ri for _, ri in p1 + p2)
    return [putative[i] for i in confirmed_idx]


# ---------------------------------------------------------------------------
# Block race-ethnicity distributions and modal cells


def block_cell_counts(truth: list[PersonRecord]) -> dict[str, Counter]:
    out: dict[str, Counter] = defaultdict(Counter)
    for t in truth:
        out[t.block][(t.race, t.eth)] += 1
    return dict(out)


def table_cell_counts(bundle: TableBundle) -> dict[str, dict[tuple[int, str], int]]:
    """Per-block race-ethnicity counts recovered from the published
    63-category race table and its Hispanic split: the not-Hispanic
    count per category is direct, the Hispanic count is the difference.
    Suppressed cells make a block unusable and it is omitted.
    """
    out: dict[str, dict[tuple[int, str], int]] = {}
    for block in bundle.blocks:
        if not (bundle.has(block, "P8") and bundle.has(block, "P9")):
            continue
        p8 = bundle.get(block, "P8")
        p9 = bundle.get(block, "P9")
        if (p8 == SUPPRESSED).any() or (p9 == SUPPRESSED).any():
            continue
        cells: dict[tuple[int, str], int] = {}
        bad = False
        for mask in ALL_RACES:
            total = int(p8[mask])
            nh = int(p9[2 + mask])
            h = total - nh
            if h < 0:
                bad = True
                break
            if nh:
                cells[(mask, "N")] = nh
            if h:
                cells[(mask, "H")] = h
        if not bad:
            out[block] = cells
    return out


def _unique_modal(counts) -> tuple[int, str] | None:
    """The strictly most frequent cell, or None on a tie or empty input."""
    best = None
    best_n = 0
    tied = False
    for cell in sorted(counts):
        n = counts[cell]
        if n > best_n:
            best, best_n, tied = cell, n, False
        elif n == best_n and n > 0:
            tied = True
    if best is None or tied:
        return None
    return best


def modal_cells(
    counts_by_block: dict[str, "Counter | dict"], universe: GeoUniverse
) -> dict[str, tuple[int, str]]:
    """Modal race-ethnicity per block with the documented fallback: a tie
    or a population of one defers to the block group, the same condition
    there defers to the national modal cell (White alone, not Hispanic).
    """
    bg_counts: dict[str, Counter] = defaultdict(Counter)
    for block in universe.blocks:
        for cell, n in counts_by_block.get(block, {}).items():
            bg_counts[block_group_of(block)][cell] += n

    out = {}
    for block in universe.blocks:
        counts = counts_by_block.get(block, {})
        pop = sum(counts.values())
        choice = None
        if pop >= 2:
            choice = _unique_modal(counts)
        if choice is None:
            bgc = bg_counts[block_group_of(block)]
            bg_pop = sum(bgc.values())
            if bg_pop >= 2:
                choice = _unique_modal(bgc)
        if choice is None:
            choice = NATIONAL_MODAL_CELL
        out[block] = choice
    return out


def _baseline_frame(
    truth: list[PersonRecord] | None,
    bundle: TableBundle | None,
    frame: str,
) -> list[tuple[str, str, int]]:
    """(block, sex, age) rows the guesses are attached to."""
    if frame == "truth":
        if truth is None:
            raise LinkageError("truth frame requested without truth records")
        return [(t.block, t.sex, t.age) for t in truth]
    if frame == "tables":
        if bundle is None:
            raise LinkageError("table frame requested without a bundle")
        rows = []
        for block, sex, b in expand_sex_agebin_frame(bundle):
            rows.append((block, sex, BIN38.bins[b][0]))
        return rows
    raise LinkageError(f"unknown frame {frame!r} (expected 'truth' or 'tables')")


def mdg_baseline(
    truth: list[PersonRecord],
    universe: GeoUniverse,
    seed: int = 0,
    frame: str = "truth",
    bundle: TableBundle | None = None,
) -> list[PersonRecord]:
    """Modal guesser: every frame record gets its block's modal
    race-ethnicity.  The seed is accepted for interface symmetry with
    the proportional guesser; the modal rule is deterministic.
    """
    del seed
    if frame == "truth":
        counts = block_cell_counts(truth)
    else:
        counts = table_cell_counts(bundle) if bundle is not None else {}
    modal = modal_cells(counts, universe)
    out = []
    for block, sex, age in _baseline_frame(truth, bundle, frame):
        race, eth = modal[block]
        out.append(PersonRecord(pid=None, hid=None, block=block, sex=sex,
                                age=age, race=race, eth=eth))
    return out


def prg_baseline(
    truth: list[PersonRecord],
    seed: int,
    frame: str = "truth",
    bundle: TableBundle | None = None,
) -> list[PersonRecord]:
    """Proportional guesser: each frame record draws independently from
    its block's empirical race-ethnicity distribution."""
    if frame == "truth":
        counts = block_cell_counts(truth)
    else:
        counts = table_cell_counts(bundle) if bundle is not None else {}
    rows = _baseline_frame(truth, bundle, frame)
    rng = np.random.default_rng(seed)

    dists: dict[str, tuple[list[tuple[int, str]], np.ndarray]] = {}
    for block in sorted(counts):
        c = counts[block]
        cells = sorted(c)
        w = np.array([c[cell] for cell in cells], dtype=float)
        dists[block] = (cells, np.cumsum(w / w.sum()))

    out = []
    for block, sex, age in rows:
        if block not in dists:
            race, eth = NATIONAL_MODAL_CELL
        else:
            cells, cdf = dists[block]
            k = int(np.searchsorted(cdf, rng.random(), side="right"))
            race, eth = cells[min(k, len(cells) - 1)]
        out.append(PersonRecord(pid=None, hid=None, block=block, sex=sex,
                                age=age, race=race, eth=eth))
    return out


def prg_upper_bound(counts) -> float:
    """Sum of squared shares over the block's race-ethnicity cells."""
    n = sum(counts.values())
    if n == 0:
        return 0.0
    return sum((v / n) ** 2 for v in counts.values())


def prg_loo_expectation(counts) -> float:
    """Leave-one-out hit probability: target drawn from the block, guess
    drawn from the block with the target removed."""
    n = sum(counts.values())
    if n <= 1:
        return 0.0
    return sum((v / n) * ((v - 1) / (n - 1)) for v in counts.values())


def prg_remove_one_modal_expectation(counts) -> float:
    """Expected hit rate when the guesser's view of the block omits one
    modal respondent while targets come from the full block.  For a
    block of nine White-alone and one Asian-alone person, all not
    Hispanic, this comes to 73/90, about 81.1 percent.
    """
    n = sum(counts.values())
    if n <= 1:
        return 0.0
    modal = _unique_modal(counts)
    if modal is None:
        modal = max(sorted(counts), key=lambda c: counts[c])
    reduced = dict(counts)
    reduced[modal] -= 1
    if reduced[modal] == 0:
        del reduced[modal]
    m = n - 1
    return sum((counts.get(c, 0) / n) * (k / m) for c, k in reduced.items())


# ---------------------------------------------------------------------------
# Stratified metrics


@dataclass(frozen=True)
class ReidRow:
    data: str
    attacker: str
    size_class: str
    modal_class: str
    solvar_class: str
    population: int
    putative: int
    confirmed: int

    @property
    def stratum(self) -> str:
        return f"{self.size_class}/{self.modal_class}/{self.solvar_class}"

    @property
    def putative_rate(self) -> float:
        return 100.0 * self.putative / self.population if self.population else 0.0

    @property
    def confirmed_rate(self) -> float:
        return 100.0 * self.confirmed / self.population if self.population else 0.0

    @property
    def precision(self) -> float | None:
        if self.putative == 0:
            return None
        return 100.0 * self.confirmed / self.putative


def _size_class(pop: int) -> str | None:
    for label, lo, hi in SIZE_CLASSES:
        if pop >= lo and (hi is None or pop <= hi):
            return label
    return None


def classify_attacker_rows(
    attacker: list[AttackerRecord],
    truth: list[PersonRecord],
    solvar_by_block: dict[str, float],
) -> list[tuple[str | None, str | None, bool, bool]]:
    """Per attacker row: (size class, modal class, zero-solvar flag,
    zero-solvar-unique flag).  Modal class and uniqueness need the truth
    record located by (pid, block); rows without one stay unclassified
    and count only toward the 'all' strata.
    """
    truth_by_key = {(t.pid, t.block): t for t in truth}
    block_pop = Counter(t.block for t in truth)
    frame = Counter((t.block, t.sex, BIN38.bin_of(t.age)) for t in truth)
    counts = block_cell_counts(truth)
    modal = {}
    for block, c in counts.items():
        m = _unique_modal(c)
        modal[block] = m  # None on tie: nobody in the block is nonmodal then

    out = []
    for a in attacker:
        size = _size_class(block_pop.get(a.block, 0))
        t = truth_by_key.get((a.pid, a.block))
        zs = solvar_by_block.get(a.block) == 0.0
        if t is None:
            out.append((size, None, zs, False))
            continue
        m = modal.get(t.block)
        modal_class = None
        if m is not None:
            modal_class = "modal" if (t.race, t.eth) == m else "nonmodal"
        unique = frame[(t.block, t.sex, BIN38.bin_of(t.age))] == 1
        out.append((size, modal_class, zs, zs and unique))
    return out


def reid_metrics(
    attacker: list[AttackerRecord],
    putative: list[PutativeRow],
    confirmed: list[PutativeRow],
    truth: list[PersonRecord],
    solvar_by_block: dict[str, float],
    data_label: str,
    attacker_label: str,
) -> list[ReidRow]:
    """Putative/confirmed counts for every stratum: block-size class
    crossed with modal classification crossed with the solution
    variability condition.  Stratum membership is a property of the
    attacker row (via its truth record), so denominators are identical
    across data sources."""
    cls = classify_attacker_rows(attacker, truth, solvar_by_block)
    put_idx = {p.attacker_index for p in putative}
    conf_idx = {p.attacker_index for p in confirmed}
    if not conf_idx <= put_idx:
        raise LinkageError("confirmed rows are not a subset of putative rows")

    size_labels = ["all"] + [label for label, _, _ in SIZE_CLASSES]
    tally: dict[tuple[str, str, str], list[int]] = {
        (s, m, v): [0, 0, 0]
        for s in size_labels for m in MODAL_CLASSES for v in SOLVAR_CLASSES
    }

    for i, (size, modal_class, zs, zsu) in enumerate(cls):
        sizes = ["all"] + ([size] if size else [])
        modals = ["all"] + ([modal_class] if modal_class else [])
        solvars = ["any"] + (["zero_solvar"] if zs else []) + (["zero_solvar_unique"] if zsu else [])
        hit_put = i in put_idx
        hit_conf = i in conf_idx
        for s in sizes:
            for m in modals:
                for v in solvars:
                    cell = tally[(s, m, v)]
                    cell[0] += 1
                    if hit_put:
                        cell[1] += 1
                    if hit_conf:
                        cell[2] += 1

    rows = []
    for s in size_labels:
        for m in MODAL_CLASSES:
            for v in SOLVAR_CLASSES:
                pop, put, conf = tally[(s, m, v)]
                rows.append(
                    ReidRow(
                        data=data_label, attacker=attacker_label,
                        size_class=s, modal_class=m, solvar_class=v,
                        population=pop, putative=put, confirmed=conf,
                    )
                )
    return rows


def write_reid_csv(rows: list[ReidRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REID_CSV_HEADER)
        for r in rows:
            prec = UNDEFINED if r.precision is None else f"{r.precision:.4f}"
            w.writerow([r.data, r.attacker, r.stratum, r.population, r.putative, r.confirmed, prec])


def write_reid_long_csv(rows: list[ReidRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REID_LONG_CSV_HEADER)
        for r in rows:
            base = [r.data, r.attacker, r.size_class, r.modal_class, r.solvar_class]
            w.writerow(base + ["putative_rate", f"{r.putative_rate:.4f}"])
            w.writerow(base + ["confirmed_rate", f"{r.confirmed_rate:.4f}"])
            prec = UNDEFINED if r.precision is None else f"{r.precision:.4f}"
            w.writerow(base + ["precision", prec])


def read_reid_csv(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REID_CSV_HEADER:
            raise LinkageError(f"{path}: bad header {reader.fieldnames!r}")
        for row in reader:
            out.append(row)
    return out
