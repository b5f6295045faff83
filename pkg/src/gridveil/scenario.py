"""Scenario configuration, the end-to-end pipeline and attack comparison."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .designer import (BLOCKS, AttackVector, DesignError, DesignerOptions, TargetOverload,
                       assemble_attack_vector, boundary_injections, design_nonoptimal, design_optimal)
from .estimation import (EstimationError, EstimatorOptions, MeasurementPlan, apply_attack,
                         estimate_state, generate_measurements, residual_analysis)
from .grid import CaseError, build_admittance, data_path, load_case
from .powerflow import PowerFlowError, solve_power_flow
from .zone import ZoneError, zone_from_dict, zone_report

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

VARIANTS = ("optimal", "nonoptimal")
CASE_DIR_ENV = "GRIDVEIL_CASE_DIR"
ORDER_ATOL = 1e-8        # matches the designer feasibility tolerance

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ScenarioError(RuntimeError):
    """Pipeline failure carrying the CLI exit code."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, exit_code: int | None = None, manifest: dict | None = None):
        super().__init__(message)
        if exit_code is not None:
            self.exit_code = exit_code
        self.manifest = manifest


class ConfigError(ScenarioError):
    exit_code = EXIT_CONFIG


def exit_code_for(exc: BaseException) -> int:
    """Map a pipeline exception onto the CLI exit-code contract."""
    if isinstance(exc, ScenarioError):
        return exc.exit_code
    if isinstance(exc, (CaseError, ZoneError, ValueError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, (PowerFlowError, DesignError, EstimationError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


def resolve_file(name: str | os.PathLike, base: Path | None = None) -> Path:
    """Find a case or fixture file.

    Search order: as given (relative to ``base`` when set), then each entry of
    GRIDVEIL_CASE_DIR, then the bundled data directory.
    """
    p = Path(name)
    candidates = [p if p.is_absolute() or base is None else base / p]
    if not p.is_absolute():
        if base is not None:
            candidates.append(p)
        for d in os.environ.get(CASE_DIR_ENV, "").split(os.pathsep):
            if d:
                candidates.append(Path(d) / p)
        candidates.append(data_path(p.name))
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"file not found: {name} (searched {', '.join(str(c) for c in candidates)})")


@dataclass(frozen=True)
class ScenarioConfig:
    case_path: Path
    zone: dict                          # interior/boundary lists, as in a zone fixture
    target_line: tuple[int, int]
    w: float
    variant: str = "both"
    plan_overrides: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    noise: bool = True
    out_dir: Path = Path("gridveil-out")
    alpha: float = 0.95
    tau: float = 3.0
    nonoptimal_seed: int = 0
    name: str = "scenario"

    def __post_init__(self):
        if not self.case_path.is_file():
            raise ConfigError(f"case file not found: {self.case_path}")
        if not self.w > 0:
            raise ConfigError(f"w must be positive, got {self.w}")
        if self.variant not in VARIANTS + ("both",):
            raise ConfigError(f"variant must be optimal, nonoptimal or both, got {self.variant!r}")
        if self.noise and not self.seeds:
            raise ConfigError("noise is enabled but the seed list is empty")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for key in ("interior", "boundary"):
            if key not in self.zone:
                raise ConfigError(f"zone is missing {key!r}")

    @property
    def variants(self) -> tuple[str, ...]:
        return VARIANTS if self.variant == "both" else (self.variant,)

    def with_seed_count(self, n: int) -> "ScenarioConfig":
        if n < 1:
            raise ConfigError("seed count must be at least 1")
        return _replace(self, seeds=tuple(range(n)))

    def with_out_dir(self, out: str | os.PathLike) -> "ScenarioConfig":
        return _replace(self, out_dir=Path(out))

    def plan(self) -> MeasurementPlan:
        try:
            return MeasurementPlan.default().with_overrides(self.plan_overrides)
        except ValueError as exc:
            raise ConfigError(f"bad measurement plan: {exc}") from None

    def describe(self) -> dict:
        """Scenario identity; compare_attacks requires these to agree."""
        return {
            "name": self.name,
            "case": self.case_path.name,
            "zone": {"interior": sorted(self.zone["interior"]), "boundary": sorted(self.zone["boundary"])},
            "target_line": list(self.target_line),
            "w": self.w,
        }


def _replace(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d.update(kw)
    return ScenarioConfig(**d)


def _seed_list(spec) -> tuple[int, ...]:
    if isinstance(spec, dict):
        return tuple(range(int(spec.get("start", 0)), int(spec.get("start", 0)) + int(spec["count"])))
    return tuple(int(s) for s in spec)


def config_from_dict(data: dict, base: Path | None = None) -> ScenarioConfig:
    """Build a config from parsed TOML; relative paths resolve against ``base``."""
    try:
        case = resolve_file(data["case"], base)
        zone_spec = data["zone"]
        if "file" in zone_spec:
            zone = json.loads(resolve_file(zone_spec["file"], base).read_text())
        else:
            zone = dict(zone_spec)
        tl = data.get("target_line") or zone.get("target_line")
        if not tl:
            raise ConfigError("no target_line given")
        noise = data.get("noise", {})
        bdd = data.get("bdd", {})
        plan = {k: (None if v == "off" or v.get("enabled", True) is False else
                    {kk: vv for kk, vv in v.items() if kk != "enabled"})
                for k, v in data.get("plan", {}).items()}
        return ScenarioConfig(
            case_path=case,
            zone={"interior": list(zone["interior"]), "boundary": list(zone["boundary"])},
            target_line=(int(tl["from"]), int(tl["to"])),
            w=float(data["w"]),
            variant=data.get("variant", "both"),
            plan_overrides=plan,
            seeds=_seed_list(noise.get("seeds", [0])),
            noise=bool(noise.get("enabled", True)),
            out_dir=Path(data.get("out_dir", "gridveil-out")),
            alpha=float(bdd.get("alpha", 0.95)),
            tau=float(bdd.get("tau", 3.0)),
            nonoptimal_seed=int(data.get("designer", {}).get("nonoptimal_seed", 0)),
            name=str(data.get("name", "scenario")),
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from None
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None


def load_config(path: str | os.PathLike) -> ScenarioConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(data, path.parent)


# ---------------------------------------------------------------------------
# pipeline

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class _Writer:
    """Writes artifact files and records them for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[dict] = []

    def write(self, rel: str, text: str, kind: str, variant: str | None = None):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        rows = text.count("\n") - 1 if rel.endswith(".csv") else None
        self.files.append({"path": rel, "kind": kind, "variant": variant, "rows": rows})


def _plot_rows(attack, residual_norms: dict[int, float]) -> list[tuple]:
    rows = []
    for block in ("v_ang", "v_mag", "p_inj", "q_inj", "p_flow_from", "q_flow_from", "i_mag"):
        for e in attack.block(block):
            rows.append((f"{block}_delta", e.element, repr(e.delta)))
    for seed, rn in residual_norms.items():
        rows.append(("residual_norm", seed, repr(rn)))
    return rows


def run_scenario(config: ScenarioConfig) -> dict:
    """Run the full pipeline and write artifacts under ``config.out_dir``.

    Returns the manifest. On failure the partial manifest is still written and
    the raised ScenarioError carries it.
    """
    out = config.out_dir
    writer = _Writer(out)
    manifest = {
        "scenario": config.describe(),
        "variants": list(config.variants),
        "seeds": list(config.seeds) if config.noise else [],
        "alpha": config.alpha,
        "tau": config.tau,
        "status": "running",
        "files": writer.files,
        "summary": {},
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        _pipeline(config, writer, manifest)
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = str(exc)
        code = exit_code_for(exc)
        try:
            _write_manifest(out, manifest)
        except OSError:
            pass
        if isinstance(exc, ScenarioError):
            exc.manifest = manifest
            raise
        raise ScenarioError(f"{type(exc).__name__}: {exc}", code, manifest) from exc
    _write_manifest(out, manifest)
    return manifest


def _write_manifest(out: Path, manifest: dict):
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _pipeline(config: ScenarioConfig, writer: _Writer, manifest: dict):
    net = load_case(config.case_path)
    adm = build_admittance(net)
    op = solve_power_flow(net, adm)
    log.info("power flow converged in %d iterations", op.iterations)
    zone = zone_from_dict(net, {**config.zone, "target_line": {"from": config.target_line[0],
                                                               "to": config.target_line[1]}})
    writer.write("zone_report.json", json.dumps(zone_report(zone, net).to_dict(), indent=1) + "\n", "zone")
    overload = TargetOverload(zone.target_line, config.w)
    plan = config.plan()
    seeds = config.seeds if config.noise else (None,)
    clean = {s: generate_measurements(net, adm, op, plan, noise=s) for s in seeds}
    est_opts = EstimatorOptions()

    for variant in config.variants:
        dopts = DesignerOptions(nonoptimal_seed=config.nonoptimal_seed)
        design = design_optimal if variant == "optimal" else design_nonoptimal
        spoofed = design(net, adm, op, zone, overload, dopts)
        log.info("%s design: objective %.6e after %d iterations", variant, spoofed.objective,
                 spoofed.iterations)
        attack = assemble_attack_vector(net, adm, op, zone, spoofed, boundary_injections(net, op, zone, spoofed))
        writer.write(f"{variant}/attack_vector.csv", attack.to_csv(), "attack_vector", variant)
        writer.write(f"{variant}/spoofed_state.json", json.dumps(spoofed.to_dict(net), indent=1) + "\n",
                     "spoofed_state", variant)
        bdd_rows, norms = [], {}
        for s in seeds:
            attacked, mapping = apply_attack(clean[s], attack)
            er = estimate_state(net, adm, attacked, est_opts)
            rep = residual_analysis(er, config.alpha, config.tau)
            tag = "noiseless" if s is None else f"seed_{s:04d}"
            writer.write(f"{variant}/estimation/{tag}.csv", er.to_csv(), "estimation", variant)
            key = -1 if s is None else s
            norms[key] = er.residual_norm
            bdd_rows.append((key, repr(er.residual_norm), repr(rep.chi_square_stat),
                             repr(rep.chi_square_threshold), rep.dof, repr(rep.max_normalized_residual),
                             rep.culprit, int(rep.chi_square_flag), int(rep.lnr_flag), rep.verdict,
                             er.iterations, len(mapping.matched), len(mapping.dropped)))
        writer.write(f"{variant}/bdd_summary.csv", _csv_text(
            ["seed", "residual_norm", "chi_square", "chi_square_threshold", "dof", "max_normalized_residual",
             "culprit", "chi_square_flag", "lnr_flag", "verdict", "iterations", "matched", "dropped"],
            bdd_rows), "bdd_summary", variant)
        writer.write(f"{variant}/plot_data.csv",
                     _csv_text(["series", "index", "value"], _plot_rows(attack, norms)), "plot_data", variant)
        manifest["summary"][variant] = {
            "objective": spoofed.objective,
            "iterations": spoofed.iterations,
            "block_sizes": {b: n for b, n in attack.block_sizes().items() if b in BLOCKS},
            "block_norms": attack.block_norms(),
            "mean_residual_norm": float(np.mean(list(norms.values()))),
            "suspect_count": sum(r[9] == "suspect" for r in bdd_rows),
            "chi_square_flags": sum(r[7] for r in bdd_rows),
        }


# ---------------------------------------------------------------------------
# comparison

def load_manifest(path: str | os.PathLike) -> tuple[dict, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        return json.loads(p.read_text()), p.parent
    except FileNotFoundError:
        raise ScenarioError(f"manifest not found: {p}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"cannot parse manifest {p}: {exc}", EXIT_IO) from None


def _pick_variant(manifest: dict, wanted: str | None, default: str) -> str:
    variants = manifest.get("variants", [])
    if wanted is not None:
        if wanted not in variants:
            raise ScenarioError(f"manifest has no {wanted!r} variant", EXIT_CONFIG)
        return wanted
    if len(variants) == 1:
        return variants[0]
    if default in variants:
        return default
    raise ScenarioError("cannot tell which variant to compare", EXIT_CONFIG)


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _variant_data(root: Path, variant: str):
    attack = AttackVector.from_csv((root / variant / "attack_vector.csv").read_text())
    rows = _read_csv(root / variant / "bdd_summary.csv")
    return attack, {int(r["seed"]): float(r["residual_norm"]) for r in rows}


def compare_attacks(manifest_a, manifest_b, variant_a: str | None = None,
                    variant_b: str | None = None) -> dict:
    """Compare two runs of the same scenario, A expected to be the optimal one.

    A run holding both variants contributes its optimal variant as A and its
    non-optimal variant as B unless told otherwise.
    """
    ma, root_a = load_manifest(manifest_a)
    mb, root_b = load_manifest(manifest_b)
    if ma.get("scenario") != mb.get("scenario"):
        raise ScenarioError("manifests describe different scenarios", EXIT_CONFIG)
    for m, root in ((ma, root_a), (mb, root_b)):
        if m.get("status") != "ok":
            raise ScenarioError(f"run in {root} did not finish", EXIT_CONFIG)
    va = _pick_variant(ma, variant_a, "optimal")
    vb = _pick_variant(mb, variant_b, "nonoptimal")
    try:
        att_a, res_a = _variant_data(root_a, va)
        att_b, res_b = _variant_data(root_b, vb)
    except OSError as exc:
        raise ScenarioError(f"missing run artifact: {exc}", EXIT_IO) from None

    blocks = {}
    for b in BLOCKS:
        na = float(np.linalg.norm(att_a.deltas(b)))
        nb_ = float(np.linalg.norm(att_b.deltas(b)))
        ratio = 1.0 if na == nb_ else (na / nb_ if nb_ > 0 else float("inf"))
        blocks[b] = {"norm_a": na, "norm_b": nb_, "ratio": ratio}
    seeds = sorted(set(res_a) & set(res_b))
    if not seeds:
        raise ScenarioError("runs share no noise seeds", EXIT_CONFIG)
    per_seed = [{"seed": s, "residual_a": res_a[s], "residual_b": res_b[s]} for s in seeds]
    mean_a = float(np.mean([res_a[s] for s in seeds]))
    mean_b = float(np.mean([res_b[s] for s in seeds]))
    # identical designs (square zone systems) differ only in rounding
    block_order = all(v["norm_a"] <= v["norm_b"] + ORDER_ATOL for v in blocks.values())
    residual_order = mean_a <= mean_b + ORDER_ATOL
    verdict = (f"{va} vs {vb}: mean residual norm {mean_a:.6g} vs {mean_b:.6g} over {len(seeds)} seeds; "
               f"residual ordering {'holds' if residual_order else 'fails'}; "
               f"block-norm ordering {'holds' if block_order else 'fails'}")
    return {
        "scenario": ma["scenario"],
        "variant_a": va,
        "variant_b": vb,
        "blocks": blocks,
        "per_seed": per_seed,
        "mean_residual_a": mean_a,
        "mean_residual_b": mean_b,
        "residual_ordering": residual_order,
        "block_ordering": block_order,
        "verdict": verdict,
    }


def comparison_csv(report: dict) -> str:
    rows = [(f"block:{b}", repr(v["norm_a"]), repr(v["norm_b"]), repr(v["ratio"]))
            for b, v in report["blocks"].items()]
    rows += [(f"seed:{r['seed']}", repr(r["residual_a"]), repr(r["residual_b"]),
              repr(r["residual_a"] / r["residual_b"]) if r["residual_b"] else "inf")
             for r in report["per_seed"]]
    return _csv_text(["item", "a", "b", "ratio"], rows)
