"""Census-style geocodes and block universes.

A block geocode is a fixed-width string of 15 decimal digits laid out as
state (2) + county (3) + tract (6) + block (4).  The first digit of the
block number doubles as the block-group digit.  Tracts nest inside
counties, block groups inside tracts, blocks inside block groups.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

GEOCODE_LEN = 15
_STATE_END = 2
_COUNTY_END = 5
_TRACT_END = 11

MANIFEST_HEADER = ("block_geocode", "population_hint")


class GeocodeError(ValueError):
    """Raised for malformed geocode strings."""


class ManifestError(ValueError):
    """Raised for malformed geography manifest files."""


@dataclass(frozen=True, slots=True)
class Geocode:
    """A parsed block geocode.

    Fields hold the digit substrings, not integers, so leading zeros
    survive round-trips.
    """

    state: str
    county: str
    tract: str
    block: str

    @property
    def text(self) -> str:
        return self.state + self.county + self.tract + self.block

    @property
    def tract_prefix(self) -> str:
        """11-digit state+county+tract prefix naming the tract."""
        return self.state + self.county + self.tract

    @property
    def block_group(self) -> str:
        """Single block-group digit (first digit of the block number)."""
        return self.block[0]

    @property
    def block_group_prefix(self) -> str:
        """12-digit prefix naming the block group."""
        return self.tract_prefix + self.block_group

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.text


def parse_geocode(text: str) -> Geocode:
    """Split a 15-digit geocode into its components.

    Raises GeocodeError when the input is not exactly 15 decimal digits.
    """
    if not isinstance(text, str):
        raise GeocodeError(f"geocode must be a string, got {type(text).__name__}")
    if len(text) != GEOCODE_LEN:
        raise GeocodeError(f"geocode must have {GEOCODE_LEN} digits, got {len(text)}: {text!r}")
    if not text.isascii() or not text.isdigit():
        raise GeocodeError(f"geocode must be decimal digits only: {text!r}")
    return Geocode(
        state=text[:_STATE_END],
        county=text[_STATE_END:_COUNTY_END],
        tract=text[_COUNTY_END:_TRACT_END],
        block=text[_TRACT_END:],
    )


def tract_of(block_geocode: str) -> str:
    """Return the 11-digit tract prefix of a block geocode."""
    parse_geocode(block_geocode)
    return block_geocode[:_TRACT_END]


def block_group_of(block_geocode: str) -> str:
    """Return the 12-digit block-group prefix of a block geocode."""
    parse_geocode(block_geocode)
    return block_geocode[: _TRACT_END + 1]


@dataclass(frozen=True)
class GeoUniverse:
    """An ordered set of blocks with declared population hints.

    The block order is the canonical iteration order for every
    deterministic operation downstream (generation, tabulation,
    reconstruction schedules).  Tracts inherit the order of their first
    block.
    """

    blocks: tuple[str, ...]
    populations: dict[str, int]
    tracts: tuple[str, ...] = field(init=False)
    _tract_blocks: dict[str, tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        tract_order: list[str] = []
        tract_blocks: dict[str, list[str]] = {}
        for b in self.blocks:
            parse_geocode(b)
            if b in seen:
                raise ManifestError(f"duplicate block geocode: {b}")
            seen.add(b)
            if b not in self.populations:
                raise ManifestError(f"block {b} missing a population hint")
            pop = self.populations[b]
            if not isinstance(pop, int) or pop < 0:
                raise ManifestError(f"block {b} population hint must be a nonnegative integer, got {pop!r}")
            t = b[:_TRACT_END]
            if t not in tract_blocks:
                tract_order.append(t)
                tract_blocks[t] = []
            tract_blocks[t].append(b)
        extra = set(self.populations) - seen
        if extra:
            raise ManifestError(f"population hints for unknown blocks: {sorted(extra)[:3]}")
        object.__setattr__(self, "tracts", tuple(tract_order))
        object.__setattr__(
            self, "_tract_blocks", {t: tuple(bs) for t, bs in tract_blocks.items()}
        )

    def blocks_in_tract(self, tract_prefix: str) -> tuple[str, ...]:
        try:
            return self._tract_blocks[tract_prefix]
        except KeyError:
            raise KeyError(f"tract {tract_prefix!r} not in universe") from None

    def population_of(self, block: str) -> int:
        return self.populations[block]

    def tract_population(self, tract_prefix: str) -> int:
        return sum(self.populations[b] for b in self.blocks_in_tract(tract_prefix))

    @property
    def total_population(self) -> int:
        return sum(self.populations.values())

    def __len__(self) -> int:
        return len(self.blocks)

    def __contains__(self, block: str) -> bool:
        return block in self.populations


def load_manifest(path: str) -> GeoUniverse:
    """Read a geography manifest CSV into a GeoUniverse.

    The file must start with the exact header ``block_geocode,population_hint``.
    """
    blocks: list[str] = []
    pops: dict[str, int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(header) != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: manifest header must be {','.join(MANIFEST_HEADER)!r}, got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            geocode, pop_text = row
            try:
                pop = int(pop_text)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: population hint not an integer: {pop_text!r}") from None
            try:
                parse_geocode(geocode)
            except GeocodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if geocode in pops:
                raise ManifestError(f"{path}:{lineno}: duplicate block geocode {geocode}")
            blocks.append(geocode)
            pops[geocode] = pop
    return GeoUniverse(blocks=tuple(blocks), populations=pops)


def save_manifest(universe: GeoUniverse, path: str) -> None:
    """Write a GeoUniverse back out as a manifest CSV (LF line endings)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for b in universe.blocks:
            writer.writerow([b, universe.populations[b]])


def synthetic_universe(
    n_tracts: int,
    blocks_per_tract: int,
    block_populations: list[int] | None = None,
    state: str = "99",
    county: str = "001",
) -> GeoUniverse:
    """Build a synthetic universe with systematic geocodes.

    Tract numbers count up from 000100; block numbers cycle the
    block-group digit 1..9 so block groups are nontrivial.  When
    ``block_populations`` is given it must hold one hint per block in
    universe order; otherwise hints default to 0 (fill them after
    generation).
    """
    if n_tracts < 1 or blocks_per_tract < 1:
        raise ValueError("need at least one tract and one block per tract")
    if blocks_per_tract > 999:
        raise ValueError("at most 999 blocks per tract")
    blocks: list[str] = []
    for ti in range(n_tracts):
        tract = f"{100 * (ti + 1):06d}"
        for bi in range(blocks_per_tract):
            bg = 1 + (bi % 9)
            blocks.append(f"{state}{county}{tract}{bg}{bi:03d}")
    n = len(blocks)
    if block_populations is None:
        pops = {b: 0 for b in blocks}
    else:
        if len(block_populations) != n:
            raise ValueError(f"expected {n} population hints, got {len(block_populations)}")
        pops = {b: int(p) for b, p in zip(blocks, block_populations)}
    return GeoUniverse(blocks=tuple(blocks), populations=pops)
