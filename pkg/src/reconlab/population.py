"""Synthetic person microdata: generation, filtering, attacker files.

Records model a census edited file: every person has a block geocode,
sex, single-year age, a race category (mask over six groups), and an
ethnicity flag.  Household ids group people who live together; person
ids stand in for linkage keys and may be absent (id-less records drop
out of the data-defined universe).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geography import GeoUniverse, tract_of
from .schema import (
    BIN38,
    ETHS,
    MAX_AGE,
    N_AGE,
    SEXES,
    SchemaError,
    parse_race_flags,
    race_flags,
    race_mask,
)

MICRODATA_HEADER = ("pid", "hid", "block", "sex", "age", "race", "ethnicity")
ATTACKER_HEADER = ("pid", "block", "sex", "age")


class GenerationError(ValueError):
    """Raised when a population spec cannot be realized."""


class MicrodataError(ValueError):
    """Raised for malformed microdata or attacker CSV files."""


@dataclass(frozen=True, slots=True)
class PersonRecord:
    pid: int | None
    hid: int | None
    block: str
    sex: str
    age: int
    race: int
    eth: str


@dataclass(frozen=True, slots=True)
class AttackerRecord:
    """One attacker-file row: an external identifier plus quasi-identifiers."""

    pid: int
    block: str
    sex: str
    age: int


def validate_record(r: PersonRecord) -> None:
    if r.sex not in SEXES:
        raise MicrodataError(f"sex must be one of {SEXES}, got {r.sex!r}")
    if not 0 <= r.age <= MAX_AGE:
        raise MicrodataError(f"age must be in 0..{MAX_AGE}, got {r.age}")
    if not 1 <= r.race <= 63:
        raise MicrodataError(f"race mask must be in 1..63, got {r.race}")
    if r.eth not in ETHS:
        raise MicrodataError(f"ethnicity must be one of {ETHS}, got {r.eth!r}")


# ---------------------------------------------------------------------------
# Population specification and generation


def mixture_from_shares(shares: dict[tuple[str, str], float]) -> dict[tuple[int, str], float]:
    """Normalize a {(race letters, eth): weight} mapping into a mixture.

    Keys map race combinations by their letters ("W", "WB", ...); weights
    are normalized to sum to one.
    """
    total = float(sum(shares.values()))
    if total <= 0:
        raise GenerationError("mixture weights must have positive sum")
    out: dict[tuple[int, str], float] = {}
    for (letters, eth), w in shares.items():
        if eth not in ETHS:
            raise GenerationError(f"ethnicity must be one of {ETHS}, got {eth!r}")
        if w < 0:
            raise GenerationError("mixture weights must be nonnegative")
        key = (race_mask(letters), eth)
        out[key] = out.get(key, 0.0) + w / total
    return out


def age_profile(name: str) -> np.ndarray:
    """Built-in age weight vectors over single years 0..115."""
    w = np.zeros(N_AGE)
    if name == "uniform":
        w[: 90] = 1.0
        w[90:] = 0.05
    elif name == "adult_heavy":
        w[:22] = 0.25
        w[22:65] = 2.0
        w[65:85] = 0.8
        w[85:] = 0.05
    else:
        raise GenerationError(f"unknown age profile {name!r}")
    return w


@dataclass(frozen=True)
class PopulationSpec:
    """Everything needed to synthesize a population over a universe.

    ``mixtures`` maps tract prefixes to race-x-ethnicity mixtures; tracts
    not listed fall back to ``default_mixture``.  Mixture weights must sum
    to 1 within 1e-9.  ``household_sizes`` weights the size of each newly
    started household; a block is filled with whole households until its
    declared population is met exactly.
    """

    universe: GeoUniverse
    household_sizes: dict[int, float]
    age_weights: np.ndarray
    sex_split: float = 0.5
    mixtures: dict[str, dict[tuple[int, str], float]] = field(default_factory=dict)
    default_mixture: dict[tuple[int, str], float] | None = None
    pid_missing_rate: float = 0.0

    def __post_init__(self) -> None:
        if not self.household_sizes:
            raise GenerationError("household_sizes must not be empty")
        for size, w in self.household_sizes.items():
            if size < 1 or w < 0:
                raise GenerationError("household sizes must be >=1 with nonnegative weights")
        if sum(self.household_sizes.values()) <= 0:
            raise GenerationError("household size weights must have positive sum")
        w = np.asarray(self.age_weights, dtype=float)
        if w.shape != (N_AGE,) or (w < 0).any() or w.sum() <= 0:
            raise GenerationError(f"age_weights must be {N_AGE} nonnegative weights with positive sum")
        if not 0.0 <= self.sex_split <= 1.0:
            raise GenerationError("sex_split must be in [0, 1]")
        if not 0.0 <= self.pid_missing_rate <= 1.0:
            raise GenerationError("pid_missing_rate must be in [0, 1]")
        for tract, mix in list(self.mixtures.items()) + (
            [("default", self.default_mixture)] if self.default_mixture else []
        ):
            s = sum(mix.values())
            if abs(s - 1.0) > 1e-9:
                raise GenerationError(f"mixture for {tract} sums to {s}, expected 1")
            for (mask, eth), p in mix.items():
                if not 1 <= mask <= 63 or eth not in ETHS or p < 0:
                    raise GenerationError(f"bad mixture cell ({mask}, {eth!r})")

    def mixture_for(self, tract_prefix: str) -> dict[tuple[int, str], float]:
        mix = self.mixtures.get(tract_prefix, self.default_mixture)
        if mix is None:
            raise GenerationError(f"no mixture for tract {tract_prefix} and no default")
        return mix


def _cdf(weights: np.ndarray) -> np.ndarray:
    c = np.cumsum(weights, dtype=float)
    return c / c[-1]


def generate_population(spec: PopulationSpec, seed: int) -> list[PersonRecord]:
    """Draw a full synthetic population; same spec and seed give identical output.

    Blocks are filled in universe order and match their declared
    populations exactly.  Raises GenerationError when the household size
    distribution cannot tile some block population (no allowed size fits
    the remainder).
    """
    rng = np.random.default_rng(seed)
    sizes = sorted(spec.household_sizes)
    size_w = np.array([spec.household_sizes[s] for s in sizes], dtype=float)
    age_cdf = _cdf(np.asarray(spec.age_weights, dtype=float))

    mix_cache: dict[str, tuple[list[tuple[int, str]], np.ndarray]] = {}

    def mix_for(tract: str) -> tuple[list[tuple[int, str]], np.ndarray]:
        if tract not in mix_cache:
            mix = spec.mixture_for(tract)
            cells = sorted(mix)
            mix_cache[tract] = (cells, _cdf(np.array([mix[c] for c in cells])))
        return mix_cache[tract]

    records: list[PersonRecord] = []
    pid = 0
    hid = 0
    for block in spec.universe.blocks:
        target = spec.universe.populations[block]
        if target == 0:
            continue
        cells, mix_cdf = mix_for(tract_of(block))
        # Whole households until the block is exactly full.
        hh_sizes: list[int] = []
        remaining = target
        while remaining > 0:
            allowed = [i for i, s in enumerate(sizes) if s <= remaining]
            if not allowed:
                raise GenerationError(
                    f"block {block}: no household size fits remaining population {remaining}"
                )
            w = size_w[allowed]
            pick = int(np.searchsorted(_cdf(w), rng.random(), side="right"))
            hh_sizes.append(sizes[allowed[min(pick, len(allowed) - 1)]])
            remaining -= hh_sizes[-1]

        n = target
        sex_draws = rng.random(n)
        ages = np.searchsorted(age_cdf, rng.random(n), side="right").clip(max=MAX_AGE)
        cat_draws = np.searchsorted(mix_cdf, rng.random(n), side="right").clip(max=len(cells) - 1)
        missing = rng.random(n) < spec.pid_missing_rate if spec.pid_missing_rate > 0 else None

        person = 0
        for size in hh_sizes:
            hid += 1
            for _ in range(size):
                pid += 1
                mask, eth = cells[cat_draws[person]]
                records.append(
                    PersonRecord(
                        pid=None if missing is not None and missing[person] else pid,
                        hid=hid,
                        block=block,
                        sex=SEXES[0] if sex_draws[person] < spec.sex_split else SEXES[1],
                        age=int(ages[person]),
                        race=mask,
                        eth=eth,
                    )
                )
                person += 1
    return records


# ---------------------------------------------------------------------------
# Data-defined universe


def data_defined_filter(pop: list[PersonRecord], seed: int = 0) -> list[PersonRecord]:
    """Restrict to records usable as linkage truth.

    Drops id-less records; among records sharing one (pid, block) keeps a
    single uniformly chosen one.  The same pid in different blocks is two
    valid records.  Running the filter twice changes nothing more.
    """
    rng = np.random.default_rng(seed)
    groups: dict[tuple[int, str], list[int]] = {}
    for i, r in enumerate(pop):
        if r.pid is None:
            continue
        groups.setdefault((r.pid, r.block), []).append(i)
    keep: set[int] = set()
    for key in groups:  # insertion order: first appearance
        idxs = groups[key]
        if len(idxs) == 1:
            keep.add(idxs[0])
        else:
            keep.add(idxs[int(rng.integers(len(idxs)))])
    return [r for i, r in enumerate(pop) if i in keep]


# ---------------------------------------------------------------------------
# Attacker files


@dataclass(frozen=True)
class Degradation:
    """Error model applied when deriving an attacker file from truth.

    ``coverage`` keeps each record with that probability; ``block_error``
    relocates a row to a different observed block; ``age_error`` resamples
    age uniformly over ``age_resample``; ``spurious_rate`` appends made-up
    rows as a fraction of the kept rows.
    """

    name: str
    coverage: float = 1.0
    block_error: float = 0.0
    sex_error: float = 0.0
    age_error: float = 0.0
    age_resample: tuple[int, int] = (0, MAX_AGE)
    spurious_rate: float = 0.0

    def __post_init__(self) -> None:
        for fieldname in ("coverage", "block_error", "sex_error", "age_error", "spurious_rate"):
            v = getattr(self, fieldname)
            if not 0.0 <= v <= (1.0 if fieldname != "spurious_rate" else 10.0):
                raise MicrodataError(f"degradation {fieldname} out of range: {v}")
        lo, hi = self.age_resample
        if not 0 <= lo <= hi <= MAX_AGE:
            raise MicrodataError(f"bad age_resample span {self.age_resample}")


def perfect_attacker() -> Degradation:
    """No degradation: the attacker holds exact identifiers for everyone."""
    return Degradation(name="perfect")


def commercial_like_attacker() -> Degradation:
    """Commercial-database-style degradation.

    Calibrated so that, against a large truth file drawn with the
    adult_heavy profile, about 37.1% of attacker rows agree with truth on
    pid, block, sex, and binned age.  The error mass is split roughly
    evenly between geocode, sex, binned-age, and spurious-row channels.
    """
    return Degradation(
        name="degraded",
        coverage=1.0,
        block_error=0.2195,
        sex_error=0.2195,
        age_error=0.2240,
        spurious_rate=0.2813,
    )


def make_attacker_file(
    pop: list[PersonRecord], deg: Degradation, seed: int
) -> list[AttackerRecord]:
    """Project truth onto attacker rows under a degradation model.

    Rows keep truth order; spurious rows follow with fresh pids.  After
    degradation the file is deduplicated on (pid, block), keeping the
    first row.
    """
    rng = np.random.default_rng(seed)
    source = [r for r in pop if r.pid is not None]
    blocks = sorted({r.block for r in source})
    n = len(source)
    if n == 0:
        return []
    keep = rng.random(n) < deg.coverage if deg.coverage < 1.0 else np.ones(n, dtype=bool)
    blk_err = rng.random(n) < deg.block_error
    sex_err = rng.random(n) < deg.sex_error
    age_err = rng.random(n) < deg.age_error
    lo, hi = deg.age_resample

    rows: list[AttackerRecord] = []
    for i, r in enumerate(source):
        if not keep[i]:
            continue
        block = r.block
        if blk_err[i] and len(blocks) > 1:
            j = int(rng.integers(len(blocks) - 1))
            other = blocks[j] if blocks[j] != block else blocks[-1]
            block = other
        sex = r.sex
        if sex_err[i]:
            sex = SEXES[1] if sex == SEXES[0] else SEXES[0]
        age = r.age
        if age_err[i]:
            age = int(rng.integers(lo, hi + 1))
        rows.append(AttackerRecord(pid=r.pid, block=block, sex=sex, age=age))

    n_spurious = int(round(deg.spurious_rate * len(rows)))
    next_pid = max((r.pid for r in source), default=0) + 1
    for k in range(n_spurious):
        rows.append(
            AttackerRecord(
                pid=next_pid + k,
                block=blocks[int(rng.integers(len(blocks)))],
                sex=SEXES[int(rng.integers(2))],
                age=int(rng.integers(lo, hi + 1)),
            )
        )

    seen: set[tuple[int, str]] = set()
    out: list[AttackerRecord] = []
    for row in rows:
        key = (row.pid, row.block)
        if key in seen:
            continue
        seen.add(key)
        out.append(row)
    return out


def attacker_truth_agreement(attacker: list[AttackerRecord], truth: list[PersonRecord]) -> float:
    """Fraction of attacker rows matching truth on pid, block, sex, binned age."""
    if not attacker:
        return 0.0
    lookup = {
        (r.pid, r.block): (r.sex, BIN38.bin_of(r.age)) for r in truth if r.pid is not None
    }
    hits = 0
    for a in attacker:
        val = lookup.get((a.pid, a.block))
        if val is not None and val == (a.sex, BIN38.bin_of(a.age)):
            hits += 1
    return hits / len(attacker)


# ---------------------------------------------------------------------------
# CSV serialization


def write_microdata(records: list[PersonRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MICRODATA_HEADER)
        for r in records:
            writer.writerow(
                [
                    "" if r.pid is None else r.pid,
                    "" if r.hid is None else r.hid,
                    r.block,
                    r.sex,
                    r.age,
                    race_flags(r.race),
                    r.eth,
                ]
            )


def read_microdata(path: str) -> list[PersonRecord]:
    records: list[PersonRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MICRODATA_HEADER:
            raise MicrodataError(
                f"{path}: header must be {','.join(MICRODATA_HEADER)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MICRODATA_HEADER):
                raise MicrodataError(f"{path}:{lineno}: expected {len(MICRODATA_HEADER)} fields")
            pid_s, hid_s, block, sex, age_s, race_s, eth = row
            try:
                rec = PersonRecord(
                    pid=int(pid_s) if pid_s else None,
                    hid=int(hid_s) if hid_s else None,
                    block=block,
                    sex=sex,
                    age=int(age_s),
                    race=parse_race_flags(race_s),
                    eth=eth,
                )
                validate_record(rec)
            except (ValueError, SchemaError) as exc:
                raise MicrodataError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return records


def write_attacker(rows: list[AttackerRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ATTACKER_HEADER)
        for r in rows:
            writer.writerow([r.pid, r.block, r.sex, r.age])


def read_attacker(path: str) -> list[AttackerRecord]:
    rows: list[AttackerRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ATTACKER_HEADER:
            raise MicrodataError(f"{path}: header must be {','.join(ATTACKER_HEADER)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise MicrodataError(f"{path}:{lineno}: expected 4 fields")
            pid_s, block, sex, age_s = row
            try:
                rows.append(AttackerRecord(pid=int(pid_s), block=block, sex=sex, age=int(age_s)))
            except ValueError as exc:
                raise MicrodataError(f"{path}:{lineno}: {exc}") from None
    return rows
