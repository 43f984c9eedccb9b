"""reconlab: a desk-scale laboratory for tabular disclosure attacks.

The package tabulates synthetic microdata into census-style summary
tables, reconstructs record-level microdata from those tables by integer
programming, bounds how much reconstructed solutions can vary, links
reconstructed records against attacker files to measure putative and
confirmed reidentification, scores the attack against statistical
baselines, and compares swapping, noise, and suppression defenses.
"""

__version__ = "0.1.0"

from .geography import GeoUniverse, Geocode, parse_geocode, tract_of, block_group_of
from .population import (
    AttackerRecord,
    Degradation,
    PersonRecord,
    PopulationSpec,
    data_defined_filter,
    generate_population,
    make_attacker_file,
)
from .schema import BIN23, BIN38, SINGLE_0_19, TRACT103, AgeSchema, inventory
from .tabulation import TableBundle, count_statistics, expand_sex_agebin_frame, tabulate
from .reconstruction import (
    ReconProblem,
    assemble_rhdf,
    build_problem_b,
    build_problem_bt,
    solve_feasible,
)
from .solvar import SolvarResult, compute_solvar, cumsolvar
from .linkage import (
    ReidRow,
    confirm_match,
    mdg_baseline,
    prg_baseline,
    putative_match,
    reid_metrics,
)
from .defenses import (
    NoiseConfig,
    SuppressConfig,
    SwapConfig,
    noise_defense,
    suppress_defense,
    swap_defense,
)
from .pipeline import ExperimentConfig, run_experiment, verify_artifacts

__all__ = [
    "AgeSchema",
    "AttackerRecord",
    "BIN23",
    "BIN38",
    "Degradation",
    "ExperimentConfig",
    "GeoUniverse",
    "Geocode",
    "NoiseConfig",
    "PersonRecord",
    "PopulationSpec",
    "ReconProblem",
    "ReidRow",
    "SINGLE_0_19",
    "SolvarResult",
    "SuppressConfig",
    "SwapConfig",
    "TRACT103",
    "TableBundle",
    "assemble_rhdf",
    "block_group_of",
    "build_problem_b",
    "build_problem_bt",
    "compute_solvar",
    "confirm_match",
    "count_statistics",
    "cumsolvar",
    "data_defined_filter",
    "expand_sex_agebin_frame",
    "generate_population",
    "inventory",
    "make_attacker_file",
    "mdg_baseline",
    "noise_defense",
    "parse_geocode",
    "prg_baseline",
    "putative_match",
    "reid_metrics",
    "run_experiment",
    "solve_feasible",
    "suppress_defense",
    "swap_defense",
    "tabulate",
    "tract_of",
    "verify_artifacts",
]
