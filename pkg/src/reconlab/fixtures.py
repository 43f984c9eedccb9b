"""Bundled worked-example data.

One real-shaped census block with sixteen residents, stored as package
data: the person records, the one-block universe, and a frozen
tabulation of the records into every published table.  The block's
published tables pin its reconstruction uniquely on the binned-age
schema (solution variability 0), which makes it the standard smoke test
for the whole tabulate/reconstruct/solvar chain.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .geography import GeoUniverse
from .population import PersonRecord, read_microdata
from .tabulation import TableBundle, read_bundle

JEFFERSON_BLOCK = "010730051031001"


def _data_path(name: str) -> Path:
    return Path(resources.files("reconlab").joinpath("data", name))


def jefferson_microdata_path() -> Path:
    return _data_path("jefferson_microdata.csv")


def jefferson_bundle_path() -> Path:
    return _data_path("jefferson_bundle.csv")


def jefferson_universe_path() -> Path:
    return _data_path("jefferson_universe.csv")


def jefferson_microdata() -> list[PersonRecord]:
    return read_microdata(str(jefferson_microdata_path()))


def jefferson_universe() -> GeoUniverse:
    return GeoUniverse(blocks=(JEFFERSON_BLOCK,), populations={JEFFERSON_BLOCK: 16})


def jefferson_bundle() -> TableBundle:
    return read_bundle(str(jefferson_bundle_path()))
