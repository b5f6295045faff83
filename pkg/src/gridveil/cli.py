"""Command-line entry point: ``gridveil <stage> ...``.

Every stage reads the previous stage's serialized output, so a pipeline can be
stepped through by hand on small cases.
"""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .designer import (AttackVector, DesignerOptions, TargetOverload, assemble_attack_vector,
                       boundary_injections, design_nonoptimal, design_optimal)
from .estimation import (MeasurementPlan, MeasurementSet, apply_attack, estimate_state,
                         generate_measurements, residual_analysis)
from .grid import build_admittance, load_case, network_to_json, validate_network
from .powerflow import OperatingPoint, PfOptions, solve_power_flow
from .scenario import (EXIT_CONFIG, ScenarioError, compare_attacks, comparison_csv, exit_code_for,
                       load_config, resolve_file, run_scenario)
from .zone import build_zone, classify_buses, load_zone, zone_report, zone_to_dict

log = logging.getLogger("gridveil")


def _guard(fn):
    """Turn pipeline exceptions into a one-line message and the contract exit code."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001
            if log.isEnabledFor(logging.DEBUG):
                log.exception("failed")
            click.echo(f"error: {exc}", err=True)
            sys.exit(exit_code_for(exc))
    return wrapper


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=not text.endswith("\n"))


def _case(path: str):
    return load_case(resolve_file(path))


def _operating_point(net, adm, op_path: str | None) -> OperatingPoint:
    if op_path:
        op = OperatingPoint.from_dict(json.loads(Path(op_path).read_text()))
        if op.state.v_mag.size != net.n_bus:
            raise ScenarioError(f"{op_path} does not match the case ({net.n_bus} buses)", EXIT_CONFIG)
        return OperatingPoint.evaluate(net, adm, op.state, iterations=op.iterations,
                                       max_mismatch=op.max_mismatch)
    return solve_power_flow(net, adm)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log per-iteration solver progress.")
def main(verbose: bool):
    """Stealthy AC false-data-injection attack design and evaluation."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@click.argument("case")
@click.option("--out", "-o", help="Write the network JSON here.")
@_guard
def parse(case, out):
    """Parse and validate a MATPOWER case file."""
    net = _case(case)
    diags = validate_network(net)
    for d in diags:
        click.echo(f"{d.code}: {d.message}", err=True)
    click.echo(f"{net.name}: {net.n_bus} buses, {len(net.branches)} branches, "
               f"{len(net.generators)} generators, base {net.base_mva:g} MVA", err=True)
    if out:
        Path(out).write_text(network_to_json(net))
    if diags:
        sys.exit(EXIT_CONFIG)


@main.command()
@click.argument("case")
@click.option("--out", "-o", help="Write the operating point JSON here.")
@click.option("--tol", default=1e-8, show_default=True, help="Mismatch tolerance (pu).")
@click.option("--max-iter", default=20, show_default=True)
@_guard
def pf(case, out, tol, max_iter):
    """Solve the AC power flow from a flat start."""
    net = _case(case)
    adm = build_admittance(net)
    op = solve_power_flow(net, adm, PfOptions(tolerance=tol, max_iterations=max_iter))
    click.echo(f"converged in {op.iterations} iterations, max mismatch {op.max_mismatch:.3e} pu", err=True)
    _emit(json.dumps(op.to_dict(), indent=1) + "\n", out)


@main.command()
@click.argument("case")
@click.option("--targets", help="Comma-separated target bus ids to grow a zone from.")
@click.option("--zone-file", help="Existing zone fixture (JSON) to check and report.")
@click.option("--target-line", help="Target branch as FROM-TO, e.g. 15-19.")
@click.option("--out", "-o", help="Write the zone fixture JSON here.")
@_guard
def zone(case, targets, zone_file, target_line, out):
    """Grow or check an attack zone and report its measurement forecast."""
    net = _case(case)
    if bool(targets) == bool(zone_file):
        raise click.UsageError("give exactly one of --targets and --zone-file")
    if zone_file:
        z = load_zone(net, resolve_file(zone_file))
    else:
        z = build_zone(net, classify_buses(net), [int(t) for t in targets.split(",")])
    if target_line:
        a, b = (int(x) for x in target_line.split("-"))
        z = z.with_target(net.find_branch(a, b).id)
    click.echo(json.dumps(zone_report(z, net).to_dict(), indent=1), err=True)
    _emit(json.dumps(zone_to_dict(z, net), indent=1) + "\n", out)


@main.command()
@click.argument("case")
@click.option("--zone-file", required=True, help="Zone fixture with a target_line.")
@click.option("--w", "w", type=float, required=True, help="Overload multiplier.")
@click.option("--variant", type=click.Choice(["optimal", "nonoptimal"]), default="optimal", show_default=True)
@click.option("--seed", default=0, show_default=True, help="Start seed for the non-optimal design.")
@click.option("--op", "op_path", help="Operating point JSON from `gridveil pf`.")
@click.option("--out", "-o", type=click.Path(file_okay=False), required=True, help="Output directory.")
@_guard
def design(case, zone_file, w, variant, seed, op_path, out):
    """Design a spoofed state and its attack vector."""
    net = _case(case)
    adm = build_admittance(net)
    op = _operating_point(net, adm, op_path)
    z = load_zone(net, resolve_file(zone_file))
    if z.target_line is None:
        raise ScenarioError(f"{zone_file} has no target_line", EXIT_CONFIG)
    fn = design_optimal if variant == "optimal" else design_nonoptimal
    spoofed = fn(net, adm, op, z, TargetOverload(z.target_line, w), DesignerOptions(nonoptimal_seed=seed))
    attack = assemble_attack_vector(net, adm, op, z, spoofed, boundary_injections(net, op, z, spoofed))
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "spoofed_state.json").write_text(json.dumps(spoofed.to_dict(net), indent=1) + "\n")
    (d / "attack_vector.csv").write_text(attack.to_csv())
    for msg in spoofed.warnings:
        click.echo(f"warning: {msg}", err=True)
    click.echo(f"{variant}: objective {spoofed.objective:.6e}, {spoofed.iterations} iterations, "
               f"{len(attack.measurement_entries())} attack entries", err=True)


@main.command()
@click.argument("case")
@click.option("--op", "op_path", help="Operating point JSON to synthesize measurements from.")
@click.option("--measurements", help="Measurement CSV to estimate from instead.")
@click.option("--seed", type=int, help="Noise seed for synthesized measurements (omit for noiseless).")
@click.option("--attack", help="Attack-vector CSV to add to the measurements.")
@click.option("--alpha", default=0.95, show_default=True, help="Chi-square confidence.")
@click.option("--tau", default=3.0, show_default=True, help="Normalized-residual threshold.")
@click.option("--out", "-o", type=click.Path(file_okay=False), help="Output directory.")
@_guard
def estimate(case, op_path, measurements, seed, attack, alpha, tau, out):
    """Run WLS state estimation and bad-data detection."""
    net = _case(case)
    adm = build_admittance(net)
    if measurements:
        ms = MeasurementSet.from_csv(Path(measurements).read_text(), seed)
    else:
        op = _operating_point(net, adm, op_path)
        ms = generate_measurements(net, adm, op, MeasurementPlan.default(), noise=seed)
    if attack:
        ms, mapping = apply_attack(ms, AttackVector.from_csv(Path(attack).read_text()))
        click.echo(f"attack: {len(mapping.matched)} matched, {len(mapping.dropped)} dropped", err=True)
    er = estimate_state(net, adm, ms)
    rep = residual_analysis(er, alpha, tau)
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "measurements.csv").write_text(ms.to_csv())
        (d / "estimation.csv").write_text(er.to_csv())
        (d / "bdd.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    click.echo(f"J={rep.chi_square_stat:.6g} (threshold {rep.chi_square_threshold:.6g}, dof {rep.dof}), "
               f"max |r_N|={rep.max_normalized_residual:.4g} at {rep.culprit}: {rep.verdict}")


@main.command()
@click.option("--config", "-c", required=True, help="Scenario TOML file.")
@click.option("--out", "-o", help="Output directory (overrides the config).")
@click.option("--seed-count", type=int, help="Use seeds 0..N-1 (overrides the config).")
@_guard
def run(config, out, seed_count):
    """Run a full scenario and write its artifact manifest."""
    cfg = load_config(config)
    if out:
        cfg = cfg.with_out_dir(out)
    if seed_count is not None:
        cfg = cfg.with_seed_count(seed_count)
    try:
        manifest = run_scenario(cfg)
    except ScenarioError as exc:
        click.echo(f"error: {exc}", err=True)
        if exc.manifest is not None:
            click.echo(f"partial manifest: {cfg.out_dir / 'manifest.json'}", err=True)
        sys.exit(exc.exit_code)
    for variant, s in manifest["summary"].items():
        click.echo(f"{variant}: objective {s['objective']:.6e}, mean residual norm "
                   f"{s['mean_residual_norm']:.6g}, {s['suspect_count']} suspect runs "
                   f"({s['chi_square_flags']} by chi-square)")
    click.echo(f"{len(manifest['files'])} files, manifest at {cfg.out_dir / 'manifest.json'}")


@main.command()
@click.argument("run_a", type=click.Path(exists=True))
@click.argument("run_b", type=click.Path(exists=True), required=False)
@click.option("--out", "-o", help="Write the comparison JSON here (a CSV is written alongside).")
@_guard
def compare(run_a, run_b, out):
    """Compare an optimal run (A) with a non-optimal run (B).

    With a single run holding both variants, its two variants are compared.
    """
    report = compare_attacks(run_a, run_b or run_a)
    for b, v in report["blocks"].items():
        click.echo(f"{b:12s} {v['norm_a']:.6e} {v['norm_b']:.6e} ratio {v['ratio']:.6g}")
    click.echo(report["verdict"])
    if out:
        p = Path(out)
        p.write_text(json.dumps(report, indent=1) + "\n")
        p.with_suffix(".csv").write_text(comparison_csv(report))


if __name__ == "__main__":
    main()
