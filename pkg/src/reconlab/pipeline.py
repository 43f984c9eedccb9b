"""Experiment orchestration.

A flat text config drives the stage chain generate, defend, tabulate,
reconstruct, solvar, attack, report; every stage reads its inputs from
the output directory and writes its products back there, so stages can
be re-run individually and a deleted tail of the chain regenerates
byte-identically.  A manifest records the sha256 of every artifact; the
solver report is hashed over a runtime-free projection because its
millisecond column varies between runs.

All randomness descends from the master seed through labeled
derivations (sha256 of "master:label"), never from global state, and
never inside a parallel region: worker processes receive fully
determined seeds, so the worker count cannot change any output.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import defenses, linkage, population, reconstruction, solvar as solvar_mod, tabulation
from .geography import GeoUniverse, load_manifest, save_manifest, synthetic_universe
from .population import (
    Degradation,
    PersonRecord,
    PopulationSpec,
    age_profile,
    commercial_like_attacker,
    data_defined_filter,
    generate_population,
    make_attacker_file,
    mixture_from_shares,
    perfect_attacker,
    read_attacker,
    read_microdata,
    validate_record,
    write_attacker,
    write_microdata,
)
from .reconstruction import (
    build_problem_b,
    build_problem_bt,
    read_solver_report,
    solution_records,
    solve_feasible,
    SolverReportRow,
    write_solver_report,
)
from .schema import race_mask
from .tabulation import TableBundle, read_bundle, tabulate, write_bundle

STAGES = ("generate", "defend", "tabulate", "reconstruct", "solvar", "attack", "report")
OUT_ROOT_ENV = "RECONLAB_OUT"
MANIFEST_NAME = "manifest.json"

LINKAGE_COUNTS_HEADER = ("data", "attacker", "stratum", "population", "putative", "confirmed")
PUTATIVE_HEADER = ("attacker_index", "pid", "block", "sex", "age", "race", "eth", "matched_pass")
SWAP_REPORT_HEADER = (
    "households", "requested_pairs", "candidate_pairs",
    "made_pairs", "unpaired_skipped", "persons_moved",
)


class ConfigError(ValueError):
    """Invalid configuration: a usage error (exit code 2)."""


class PipelineError(RuntimeError):
    """A stage failed; completed artifacts are left in place."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def derive_seed(master: int, label: str) -> int:
    """Stage and task seeds: first 8 bytes of sha256("master:label")."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Configuration


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_household_sizes(text: str) -> dict[int, float]:
    out: dict[int, float] = {}
    for part in text.split(","):
        size, _, w = part.partition(":")
        out[int(size.strip())] = float(w)
    return out


def _parse_mixture(text: str) -> dict[tuple[int, str], float]:
    shares: dict[tuple[str, str], float] = {}
    for part in text.split(";"):
        cell, _, w = part.partition(":")
        letters, _, eth = cell.partition(",")
        shares[(letters.strip(), eth.strip())] = float(w)
    return mixture_from_shares(shares)


_KNOWN_KEYS = {
    "universe.manifest": str,
    "universe.tracts": int,
    "universe.blocks_per_tract": int,
    "universe.block_pop_min": int,
    "universe.block_pop_max": int,
    "universe.state": str,
    "universe.county": str,
    "population.household_sizes": _parse_household_sizes,
    "population.age_profile": str,
    "population.sex_split": float,
    "population.pid_missing_rate": float,
    "defense.kind": str,
    "defense.swap.rate": float,
    "defense.swap.scope": str,
    "defense.swap.rule": str,
    "defense.noise.family": str,
    "defense.noise.frame_scale": float,
    "defense.noise.cell_scale": float,
    "defense.suppress.threshold": int,
    "recon.mode": str,
    "recon.tables": str,
    "recon.node_budget": int,
    "recon.time_budget_ms": float,
    "solvar.time_budget_ms": float,
    "attack.preset": str,
    "attack.baselines": _parse_bool,
    "attack.strata": str,
    "attack.reference_solvar": str,
    "seed": int,
    "out": str,
}

_DEFENSE_KINDS = ("none", "swap", "noise", "suppress")
_ATTACK_PRESETS = ("perfect", "commercial")


@dataclass
class ExperimentConfig:
    """Parsed experiment parameters plus the raw key-value text."""

    raw: dict[str, str]
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, eq, value = stripped.partition("=")
            if not eq:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key = key.strip()
            if key in raw:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
        cfg = cls(raw=raw)
        cfg._validate()
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def _validate(self) -> None:
        for key, value in self.raw.items():
            if key not in _KNOWN_KEYS and not key.startswith("population.mixture."):
                raise ConfigError(f"unknown config key {key!r}")
            parser = _KNOWN_KEYS.get(key, _parse_mixture)
            try:
                self.values[key] = parser(value)
            except (ValueError, population.GenerationError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None

        if "seed" not in self.values:
            raise ConfigError("config key 'seed' is required")
        has_manifest = "universe.manifest" in self.values
        has_synth = "universe.tracts" in self.values
        if has_manifest == has_synth:
            raise ConfigError(
                "exactly one of 'universe.manifest' and 'universe.tracts' is required"
            )
        if has_synth:
            for k in ("universe.blocks_per_tract", "universe.block_pop_min", "universe.block_pop_max"):
                if k not in self.values:
                    raise ConfigError(f"synthetic universe needs config key {k!r}")
            if self.get("universe.block_pop_min") > self.get("universe.block_pop_max"):
                raise ConfigError("universe.block_pop_min exceeds universe.block_pop_max")
        if "population.household_sizes" not in self.values:
            raise ConfigError("config key 'population.household_sizes' is required")
        if "population.mixture.default" not in self.values:
            raise ConfigError("config key 'population.mixture.default' is required")

        kind = self.get("defense.kind", "none")
        if kind not in _DEFENSE_KINDS:
            raise ConfigError(
                f"config key 'defense.kind': unknown defense {kind!r} "
                f"(expected one of {', '.join(_DEFENSE_KINDS)})"
            )
        if kind == "swap" and "defense.swap.rate" not in self.values:
            raise ConfigError("config key 'defense.swap.rate' is required for the swap defense")
        mode = self.get("recon.mode", "b")
        if mode not in ("b", "bt"):
            raise ConfigError(f"config key 'recon.mode': expected 'b' or 'bt', got {mode!r}")
        preset = self.get("attack.preset", "perfect")
        if preset not in _ATTACK_PRESETS:
            raise ConfigError(
                f"config key 'attack.preset': unknown preset {preset!r} "
                f"(expected one of {', '.join(_ATTACK_PRESETS)})"
            )
        strata = self.get("attack.strata", "default")
        if strata != "default":
            raise ConfigError(f"config key 'attack.strata': only 'default' is supported, got {strata!r}")
        profile = self.get("population.age_profile", "uniform")
        try:
            age_profile(profile)
        except population.GenerationError as exc:
            raise ConfigError(f"config key 'population.age_profile': {exc}") from None

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    @property
    def master_seed(self) -> int:
        return self.values["seed"]

    @property
    def defense_kind(self) -> str:
        return self.get("defense.kind", "none")

    @property
    def recon_mode(self) -> str:
        return self.get("recon.mode", "b")

    @property
    def recon_tables(self) -> tuple[str, ...] | None:
        raw = self.get("recon.tables")
        if raw is None:
            return None
        return tuple(t.strip() for t in raw.split(",") if t.strip())

    def degradation(self) -> Degradation:
        if self.get("attack.preset", "perfect") == "perfect":
            return perfect_attacker()
        return commercial_like_attacker()

    def canonical_text(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))


# ---------------------------------------------------------------------------
# Manifest


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hash(path: Path) -> str:
    """Content hash; the solver report hashes a millis-free projection."""
    if path.name == "solver_report.csv":
        rows = read_solver_report(str(path))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(reconstruction.SOLVER_REPORT_HEADER)
        for r in rows:
            w.writerow([r.geocode, r.status, r.nodes, "0"])
        return hashlib.sha256(buf.getvalue().encode("utf-8")).hexdigest()
    return file_sha256(path)


def read_manifest(out: Path) -> dict:
    p = out / MANIFEST_NAME
    if not p.exists():
        return {"config": None, "files": {}}
    return json.loads(p.read_text(encoding="utf-8"))


def update_manifest(out: Path, names: list[str], config_hash: str | None = None) -> None:
    m = read_manifest(out)
    if config_hash is not None:
        m["config"] = config_hash
    for name in names:
        m["files"][name] = artifact_hash(out / name)
    text = json.dumps(m, indent=2, sort_keys=True) + "\n"
    (out / MANIFEST_NAME).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Stage bodies


def _stage_generate(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    del jobs
    if "universe.manifest" in cfg.values:
        universe = load_manifest(cfg.get("universe.manifest"))
    else:
        n_tracts = cfg.get("universe.tracts")
        per = cfg.get("universe.blocks_per_tract")
        lo = cfg.get("universe.block_pop_min")
        hi = cfg.get("universe.block_pop_max")
        rng = np.random.default_rng(derive_seed(cfg.master_seed, "universe"))
        pops = [int(rng.integers(lo, hi + 1)) for _ in range(n_tracts * per)]
        universe = synthetic_universe(
            n_tracts, per, pops,
            state=cfg.get("universe.state", "99"),
            county=cfg.get("universe.county", "001"),
        )
    save_manifest(universe, str(out / "universe.csv"))

    mixtures = {
        key[len("population.mixture."):]: val
        for key, val in cfg.values.items()
        if key.startswith("population.mixture.") and key != "population.mixture.default"
    }
    spec = PopulationSpec(
        universe=universe,
        household_sizes=cfg.get("population.household_sizes"),
        age_weights=age_profile(cfg.get("population.age_profile", "uniform")),
        sex_split=cfg.get("population.sex_split", 0.5),
        mixtures=mixtures,
        default_mixture=cfg.get("population.mixture.default"),
        pid_missing_rate=cfg.get("population.pid_missing_rate", 0.0),
    )
    pop = generate_population(spec, derive_seed(cfg.master_seed, "generate"))
    write_microdata(pop, str(out / "truth.csv"))
    return ["universe.csv", "truth.csv"]


def _stage_defend(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    del jobs
    truth = read_microdata(str(out / "truth.csv"))
    kind = cfg.defense_kind
    written = ["defended.csv"]
    if kind == "swap":
        swap_cfg = defenses.SwapConfig(
            rate=cfg.get("defense.swap.rate"),
            scope=cfg.get("defense.swap.scope", "tract"),
            rule=cfg.get("defense.swap.rule", "uniform"),
            seed=derive_seed(cfg.master_seed, "defend"),
        )
        defended, report = defenses.swap_defense(truth, swap_cfg)
        with open(out / "swap_report.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWAP_REPORT_HEADER)
            w.writerow([
                report.households, report.requested_pairs, report.candidate_pairs,
                report.made_pairs, report.unpaired_skipped, report.persons_moved,
            ])
        written.append("swap_report.csv")
    elif kind == "noise":
        universe = load_manifest(str(out / "universe.csv"))
        noise_cfg = defenses.NoiseConfig(
            family=cfg.get("defense.noise.family", "two_sided_geometric"),
            frame_scale=cfg.get("defense.noise.frame_scale", 1.0),
            cell_scale=cfg.get("defense.noise.cell_scale", 1.0),
        )
        defended, _ = defenses.noise_defense(
            truth, universe, noise_cfg, derive_seed(cfg.master_seed, "defend")
        )
    else:
        # none and suppress leave the microdata alone; suppression acts on tables
        defended = truth
    write_microdata(defended, str(out / "defended.csv"))
    return written


def _stage_tabulate(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    del jobs
    defended = read_microdata(str(out / "defended.csv"))
    universe = load_manifest(str(out / "universe.csv"))
    bundle = tabulate(defended, universe)
    written = ["bundle.csv"]
    if cfg.defense_kind == "suppress":
        sup_cfg = defenses.SuppressConfig(threshold=cfg.get("defense.suppress.threshold", 3))
        bundle, report = defenses.suppress_defense(bundle, sup_cfg)
        defenses.write_suppression_csv(report, str(out / "suppression.csv"))
        written.append("suppression.csv")
    write_bundle(bundle, str(out / "bundle.csv"))
    return written


def _solve_one_geo(args) -> tuple[str, str, int, float, list[PersonRecord]]:
    bundle, scope, mode, tables, seed, node_budget, time_budget_ms = args
    if mode == "b":
        problem = build_problem_b(bundle, scope, tables)
    else:
        problem = build_problem_bt(bundle, scope, tables)
    sol = solve_feasible(
        problem, seed=seed, node_budget=node_budget, time_budget_ms=time_budget_ms
    )
    records = []
    if sol.status == "feasible" and sol.values is not None:
        records = solution_records(problem, sol.values)
    return scope, sol.status, sol.nodes, sol.millis, records


def _stage_reconstruct(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    bundle = read_bundle(str(out / "bundle.csv"))
    mode = cfg.recon_mode
    tables = cfg.recon_tables
    seed = derive_seed(cfg.master_seed, "reconstruct")
    node_budget = cfg.get("recon.node_budget", reconstruction.DEFAULT_NODE_BUDGET)
    time_budget_ms = cfg.get("recon.time_budget_ms", reconstruction.DEFAULT_TIME_BUDGET_MS)
    scopes = bundle.blocks if mode == "b" else bundle.tracts

    tasks = [(bundle, s, mode, tables, seed, node_budget, time_budget_ms) for s in scopes]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one_geo, tasks, chunksize=1))
    else:
        results = [_solve_one_geo(t) for t in tasks]

    by_scope = {r[0]: r for r in results}
    records: list[PersonRecord] = []
    report: list[SolverReportRow] = []
    for s in scopes:
        scope, status, nodes, millis, recs = by_scope[s]
        report.append(SolverReportRow(scope, status, nodes, millis))
        records.extend(recs)
    write_microdata(records, str(out / "rhdf.csv"))
    write_solver_report(report, str(out / "solver_report.csv"))
    return ["rhdf.csv", "solver_report.csv"]


def _solvar_one_block(args) -> tuple[str, int, int, float, float, str]:
    bundle, block, tables, seed, time_budget_ms = args
    problem = build_problem_b(bundle, block, tables)
    try:
        res = solvar_mod.compute_solvar(problem, seed=seed, time_budget_ms=time_budget_ms)
    except solvar_mod.SolvarError:
        return block, 0, 0, 0.0, 0.0, "unavailable"
    return block, res.population, res.dstar, res.solvar, res.max_solvar, res.status


def _stage_solvar(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    bundle = read_bundle(str(out / "bundle.csv"))
    tables = cfg.recon_tables
    seed = derive_seed(cfg.master_seed, "solvar")
    time_budget_ms = cfg.get("solvar.time_budget_ms", 30_000.0)

    tasks = [(bundle, b, tables, seed, time_budget_ms) for b in bundle.blocks]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_solvar_one_block, tasks, chunksize=1))
    else:
        raw = [_solvar_one_block(t) for t in tasks]

    by_block = {r[0]: r for r in raw}
    results = []
    for b in bundle.blocks:
        block, pop, dstar, sv, msv, status = by_block[b]
        results.append(solvar_mod.SolvarResult(block, pop, dstar, sv, msv, status))
    solvar_mod.write_solvar_csv(results, str(out / "solvar.csv"))
    usable = [r for r in results if r.status != "unavailable"]
    table = solvar_mod.cumsolvar(usable, seed=derive_seed(cfg.master_seed, "cumsolvar"))
    solvar_mod.write_cumsolvar_csv(table, str(out / "cumsolvar.csv"))
    return ["solvar.csv", "cumsolvar.csv"]


def _write_putative(rows: list[linkage.PutativeRow], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PUTATIVE_HEADER)
        for p in rows:
            w.writerow([p.attacker_index, p.pid, p.block, p.sex, p.age, p.race, p.eth, p.matched_pass])


def solvar_map_from_csv(path: str) -> dict[str, float | None]:
    """Per-block solvar for stratification; non-exact rows give None so
    they never count as proven-zero."""
    out: dict[str, float | None] = {}
    for r in solvar_mod.read_solvar_csv(path):
        out[r.block] = r.solvar if r.status == "exact" else None
    return out


def _stage_attack(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    del jobs
    truth = read_microdata(str(out / "truth.csv"))
    truth_dd = data_defined_filter(truth, seed=derive_seed(cfg.master_seed, "data_defined"))
    attacker = make_attacker_file(
        truth_dd, cfg.degradation(), derive_seed(cfg.master_seed, "attack")
    )
    write_attacker(attacker, str(out / "attacker.csv"))

    sources: list[tuple[str, list[PersonRecord]]] = [
        (f"rhdf_{cfg.recon_mode}", read_microdata(str(out / "rhdf.csv")))
    ]
    written = ["attacker.csv"]
    if cfg.get("attack.baselines", True):
        universe = load_manifest(str(out / "universe.csv"))
        mdg = linkage.mdg_baseline(truth_dd, universe)
        prg = linkage.prg_baseline(truth_dd, seed=derive_seed(cfg.master_seed, "prg"))
        write_microdata(mdg, str(out / "mdg.csv"))
        write_microdata(prg, str(out / "prg.csv"))
        written += ["mdg.csv", "prg.csv"]
        sources += [("mdg", mdg), ("prg", prg)]

    ref = cfg.get("attack.reference_solvar", str(out / "solvar.csv"))
    solvar_map = solvar_map_from_csv(ref)

    attacker_label = cfg.get("attack.preset", "perfect")
    all_rows: list[linkage.ReidRow] = []
    for label, records in sources:
        putative = linkage.putative_match(records, attacker)
        confirmed = linkage.confirm_match(putative, truth_dd)
        _write_putative(putative, out / f"putative_{label}.csv")
        _write_putative(confirmed, out / f"confirmed_{label}.csv")
        written += [f"putative_{label}.csv", f"confirmed_{label}.csv"]
        all_rows.extend(
            linkage.reid_metrics(
                attacker, putative, confirmed, truth_dd, solvar_map, label, attacker_label
            )
        )

    with open(out / "linkage_counts.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LINKAGE_COUNTS_HEADER)
        for r in all_rows:
            w.writerow([r.data, r.attacker, r.stratum, r.population, r.putative, r.confirmed])
    written.append("linkage_counts.csv")
    return written


def read_linkage_counts(path: str) -> list[linkage.ReidRow]:
    out: list[linkage.ReidRow] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LINKAGE_COUNTS_HEADER:
            raise PipelineError("report", f"{path}: bad header {reader.fieldnames!r}")
        for row in reader:
            size, modal, sv = row["stratum"].split("/")
            out.append(
                linkage.ReidRow(
                    data=row["data"], attacker=row["attacker"],
                    size_class=size, modal_class=modal, solvar_class=sv,
                    population=int(row["population"]),
                    putative=int(row["putative"]),
                    confirmed=int(row["confirmed"]),
                )
            )
    return out


def _stage_report(cfg: ExperimentConfig, out: Path, jobs: int) -> list[str]:
    del cfg, jobs
    rows = read_linkage_counts(str(out / "linkage_counts.csv"))
    linkage.write_reid_csv(rows, str(out / "reid.csv"))
    linkage.write_reid_long_csv(rows, str(out / "reid_long.csv"))

    lines = ["reidentification summary", "========================", ""]
    by_data: dict[str, list[linkage.ReidRow]] = {}
    for r in rows:
        by_data.setdefault(r.data, []).append(r)
    for data in sorted(by_data):
        lines.append(f"data source: {data}")
        lines.append(f"  {'stratum':40s} {'pop':>8s} {'putat.':>8s} {'conf.':>8s} {'prec%':>8s}")
        for r in by_data[data]:
            if r.population == 0:
                continue
            prec = "NA" if r.precision is None else f"{r.precision:8.1f}"
            lines.append(
                f"  {r.stratum:40s} {r.population:8d} {r.putative:8d} {r.confirmed:8d} {prec:>8s}"
            )
        lines.append("")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ["reid.csv", "reid_long.csv", "summary.txt"]


_STAGE_BODIES = {
    "generate": _stage_generate,
    "defend": _stage_defend,
    "tabulate": _stage_tabulate,
    "reconstruct": _stage_reconstruct,
    "solvar": _stage_solvar,
    "attack": _stage_attack,
    "report": _stage_report,
}


def run_stage(cfg: ExperimentConfig, out: Path, stage: str, jobs: int = 1) -> list[str]:
    if stage not in _STAGE_BODIES:
        raise ConfigError(f"unknown stage {stage!r} (expected one of {', '.join(STAGES)})")
    out.mkdir(parents=True, exist_ok=True)
    try:
        written = _STAGE_BODIES[stage](cfg, out, jobs)
    except (ConfigError, PipelineError):
        raise
    except Exception as exc:
        raise PipelineError(stage, str(exc)) from exc
    config_hash = hashlib.sha256(cfg.canonical_text().encode("utf-8")).hexdigest()
    update_manifest(out, written, config_hash=config_hash)
    return written


def run_experiment(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> Path:
    """Run every stage in order; returns the artifact directory."""
    for stage in STAGES:
        run_stage(cfg, out, stage, jobs=jobs)
    return out


# ---------------------------------------------------------------------------
# Verification


def _verify_bundle(cfg: ExperimentConfig, out: Path, problems: list[str]) -> None:
    defended = read_microdata(str(out / "defended.csv"))
    universe = load_manifest(str(out / "universe.csv"))
    fresh = tabulate(defended, universe)
    published = read_bundle(str(out / "bundle.csv"))
    if set(published.counts) != set(fresh.counts):
        problems.append("bundle: table set differs from a fresh tabulation of defended.csv")
        return
    threshold = cfg.get("defense.suppress.threshold", 3)
    for key in sorted(published.counts):
        pub = published.counts[key]
        ref = fresh.counts[key]
        vis = pub != tabulation.SUPPRESSED
        if not np.array_equal(pub[vis], ref[vis]):
            problems.append(f"bundle: visible cells of {key} differ from defended microdata")
        if cfg.defense_kind == "suppress":
            bad = vis & (pub >= 1) & (pub < threshold)
            if bad.any():
                problems.append(f"bundle: small positive cells of {key} escaped suppression")
        elif (~vis).any():
            problems.append(f"bundle: unexpected suppression markers in {key}")


def _verify_rhdf(cfg: ExperimentConfig, out: Path, problems: list[str]) -> None:
    bundle = read_bundle(str(out / "bundle.csv"))
    rhdf = read_microdata(str(out / "rhdf.csv"))
    report = {r.geocode: r for r in read_solver_report(str(out / "solver_report.csv"))}
    mode = cfg.recon_mode
    tables = cfg.recon_tables
    scopes = bundle.blocks if mode == "b" else bundle.tracts
    if set(report) != set(scopes):
        problems.append("solver report geographies do not match the bundle")
        return

    from .schema import BIN38, ETH_INDEX, SEX_INDEX, TRACT103
    from .geography import tract_of

    by_scope: dict[str, list[PersonRecord]] = {s: [] for s in scopes}
    for r in rhdf:
        scope = r.block if mode == "b" else tract_of(r.block)
        if scope not in by_scope:
            problems.append(f"rhdf record in unknown geography {r.block}")
            return
        by_scope[scope].append(r)

    for scope in scopes:
        status = report[scope].status
        if status != "feasible":
            if by_scope[scope]:
                problems.append(f"rhdf has records for {scope} despite status {status}")
            continue
        problem = (
            build_problem_b(bundle, scope, tables) if mode == "b"
            else build_problem_bt(bundle, scope, tables)
        )
        grid = problem.grid
        index = {}
        for i in range(problem.n_vars):
            index[(problem.blocks[problem.var_block[i]], int(problem.var_cell[i]))] = i
        x = np.zeros(problem.n_vars, dtype=np.int64)
        ok = True
        for r in by_scope[scope]:
            cat = BIN38.bin_of(r.age) if mode == "b" else TRACT103.bin_of(r.age)
            cell = grid.flat(SEX_INDEX[r.sex], cat, r.race, ETH_INDEX[r.eth])
            key = (r.block, cell)
            if key not in index:
                problems.append(f"rhdf record for {scope} lies outside the reduced problem")
                ok = False
                break
            x[index[key]] += 1
        if not ok:
            continue
        if (x < problem.lb).any() or (x > problem.ub).any():
            problems.append(f"rhdf solution for {scope} violates variable bounds")
            continue
        lhs = problem.matrix() @ x
        if not np.array_equal(lhs, problem.rhs):
            bad = int(np.flatnonzero(lhs != problem.rhs)[0])
            problems.append(
                f"rhdf solution for {scope} violates constraint {problem.row_names[bad]}"
            )


def _verify_solvar(out: Path, problems: list[str]) -> None:
    results = solvar_mod.read_solvar_csv(str(out / "solvar.csv"))
    for r in results:
        if r.status == "unavailable":
            continue
        if not 0 <= r.dstar <= r.population:
            problems.append(f"solvar: block {r.block} has d*={r.dstar} outside [0, {r.population}]")
        # the CSV carries four decimals, so compare at that precision
        want = 100.0 * r.dstar / r.population if r.population else 0.0
        if abs(r.solvar - want) > 5e-5 + 1e-9:
            problems.append(f"solvar: block {r.block} solvar does not equal 100*dstar/population")
        if abs(r.max_solvar - min(2.0 * r.solvar, 100.0)) > 1.5e-4:
            problems.append(f"solvar: block {r.block} max_solvar is not min(2*solvar, 100)")

    rows = []
    with open(out / "cumsolvar.csv", "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    cum = [int(r["cum_population"]) for r in rows]
    if cum != sorted(cum):
        problems.append("cumsolvar: cumulative population is not nondecreasing")


def _verify_linkage(cfg: ExperimentConfig, out: Path, problems: list[str]) -> None:
    counts = read_linkage_counts(str(out / "linkage_counts.csv"))
    by_stratum: dict[tuple[str, str], dict[str, tuple[int, int]]] = {}
    for r in counts:
        if r.confirmed > r.putative:
            problems.append(f"linkage: {r.data}/{r.stratum} has confirmed > putative")
        if r.putative > r.population:
            problems.append(f"linkage: {r.data}/{r.stratum} has putative > population")
        by_stratum.setdefault((r.attacker, r.stratum), {})[r.data] = (r.population, r.putative)
    # putative counts agree wherever the sources share one linking frame:
    # the baselines always do; the reconstruction joins them only when no
    # defense separates the published tables from the truth.  When the
    # attacker file carries spurious or erroneous rows, which rows match
    # inside an oversubscribed (block, sex, agebin) group is age-alignment
    # dependent, so only strata that are a property of whole groups (size
    # and zero-solvar classes) stay source-invariant; with a perfect
    # attacker every stratum does.
    strict = cfg.defense_kind == "none" and cfg.get("attack.preset", "perfect") == "perfect"
    for (attacker, stratum), per_data in by_stratum.items():
        _, modal_class, solvar_class = stratum.split("/")
        group_level = modal_class == "all" and solvar_class in ("any", "zero_solvar")
        if not (strict or group_level):
            continue
        shared = dict(per_data)
        if cfg.defense_kind != "none":
            shared.pop(f"rhdf_{cfg.recon_mode}", None)
        if len(set(shared.values())) > 1:
            problems.append(
                f"linkage: putative counts differ across same-frame sources in stratum {stratum}"
            )

    reid_path = out / "reid.csv"
    if reid_path.exists():
        for row in linkage.read_reid_csv(str(reid_path)):
            putative = int(row["putative"])
            confirmed = int(row["confirmed"])
            if putative == 0:
                if row["precision"] != linkage.UNDEFINED:
                    problems.append(f"reid: stratum {row['stratum']} has precision on zero putative")
            else:
                want = 100.0 * confirmed / putative
                if abs(float(row["precision"]) - want) > 5e-4:
                    problems.append(
                        f"reid: stratum {row['stratum']} precision is not 100*confirmed/putative"
                    )


def verify_artifacts(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Re-check manifest hashes and module invariants over an artifact
    directory.  Returns human-readable violation descriptions."""
    problems: list[str] = []
    manifest = read_manifest(out)
    for name, recorded in sorted(manifest.get("files", {}).items()):
        p = out / name
        if not p.exists():
            problems.append(f"manifest: {name} is missing")
            continue
        actual = artifact_hash(p)
        if actual != recorded:
            problems.append(f"manifest: {name} content hash differs from the recorded hash")

    for fname in ("truth.csv", "defended.csv", "rhdf.csv"):
        p = out / fname
        if not p.exists():
            continue
        try:
            for r in read_microdata(str(p)):
                validate_record(r)
        except (population.MicrodataError, ValueError) as exc:
            problems.append(f"{fname}: {exc}")

    if (out / "bundle.csv").exists() and (out / "defended.csv").exists():
        _verify_bundle(cfg, out, problems)
    if (out / "rhdf.csv").exists() and (out / "solver_report.csv").exists():
        _verify_rhdf(cfg, out, problems)
    if (out / "solvar.csv").exists() and (out / "cumsolvar.csv").exists():
        _verify_solvar(out, problems)
    if (out / "linkage_counts.csv").exists():
        _verify_linkage(cfg, out, problems)
    return problems
