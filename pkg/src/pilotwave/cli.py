"""Command-line interface.

Subcommands:

* ``pilotwave run SCENARIO -o OUTDIR [--seed N] [--threads N]
  [--override key=value ...]`` — run a scenario (bundled name or file path),
  write trajectory/density/report artifacts plus an atomic run manifest.
  Exit 0: certified; 2: completed with diagnostics (node events, leakage,
  boundary contamination); 1: failure.
* ``pilotwave validate SCENARIO`` — print diagnostics; exit 0 iff clean.
* ``pilotwave list`` — bundled scenarios and fixtures.
* ``pilotwave export RUNDIR --kind {A_T,B,E_T,psi,local} [--time T]
  [-o PATH]`` — field/wavefunction exports from a finished run.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time as _time

import numpy as np
import yaml

from . import __version__, exports
from .beables import local_expectation, reconstruct_A, reconstruct_B, reconstruct_E_T
from .ensemble import ScenarioInvalid, run_ensemble
from .guidance import Trajectory, make_view
from .model import FockDomain, validate_scenario
from .scenarios import (
    RunArtifacts,
    ScenarioFormatError,
    apply_overrides,
    list_bundled,
    list_fixtures,
    resolve_scenario_source,
    scenario_from_dict,
    scenario_hash,
    scenario_to_dict,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIAGNOSTICS = 2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilotwave", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"pilotwave {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write artifacts")
    run.add_argument("scenario", help="bundled scenario name or YAML path")
    run.add_argument("-o", "--output", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the ensemble seed")
    run.add_argument("--threads", type=int, default=None,
                     help="worker threads for FFT/BLAS (recorded; vectorized code path)")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted-path scenario override, e.g. ensemble.samples=100")

    val = sub.add_parser("validate", help="validate a scenario document")
    val.add_argument("scenario")

    sub.add_parser("list", help="list bundled scenarios and fixtures")

    exp = sub.add_parser("export", help="export fields or wavefunctions from a run")
    exp.add_argument("run_dir")
    exp.add_argument("--kind", required=True, choices=["A_T", "B", "E_T", "psi", "local"])
    exp.add_argument("--time", type=float, default=None,
                     help="trajectory sample time (A_T/B/E_T); defaults to t=0")
    exp.add_argument("-o", "--output", default=None, help="output file path")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.scenario, args.output, seed=args.seed,
                           threads=args.threads, overrides=args.override)
        if args.command == "validate":
            return cmd_validate(args.scenario)
        if args.command == "list":
            return cmd_list()
        if args.command == "export":
            return cmd_export(args.run_dir, args.kind, args.time, args.output)
    except (ScenarioFormatError, ScenarioInvalid, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_FAILURE  # pragma: no cover


def _load_doc(ref: str, overrides: list[str], seed: int | None) -> dict:
    try:
        doc = yaml.safe_load(resolve_scenario_source(ref))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioFormatError(f"YAML parse error{loc}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise ScenarioFormatError("scenario document must be a key-value tree")
    if overrides:
        doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc.setdefault("ensemble", {})["seed"] = int(seed)
    return doc


def cmd_validate(ref: str) -> int:
    doc = _load_doc(ref, [], None)
    scenario = scenario_from_dict(doc)
    diags = validate_scenario(scenario)
    for d in diags:
        print(d)
    if not diags:
        print(f"{scenario.name}: ok")
    return EXIT_OK if not diags else EXIT_FAILURE


def cmd_list() -> int:
    print("bundled scenarios:")
    for name in list_bundled():
        print(f"  {name}")
    print("fixtures:")
    for name in list_fixtures():
        print(f"  {name}")
    return EXIT_OK


def cmd_run(ref: str, out_dir: str, seed: int | None = None, threads: int | None = None,
            overrides: list[str] | None = None) -> int:
    t_start = _time.perf_counter()
    doc = _load_doc(ref, overrides or [], seed)
    scenario = scenario_from_dict(doc)
    resolved = scenario_to_dict(scenario)

    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []

    def out(name: str) -> str:
        written.append(name)
        return os.path.join(out_dir, name)

    try:
        if threads:
            import scipy.fft

            with scipy.fft.set_workers(threads):
                result = run_ensemble(scenario)
        else:
            result = run_ensemble(scenario)
        t_solve = _time.perf_counter()

        exports.atomic_write_text(out("scenario.resolved.yaml"),
                                  yaml.safe_dump(resolved, sort_keys=True))
        coord_names = _coordinate_names(scenario)
        exports.write_trajectory_bundle(out("trajectories.csv"), result.batch,
                                        coord_names, scenario.trajectory_bundle)
        exports.write_checkpoint_positions(out("ensemble_checkpoints.csv"), result.batch,
                                           result.checkpoint_indices, coord_names)
        for pos, (i, dens) in enumerate(zip(result.checkpoint_indices, result.checkpoint_densities)):
            exports.write_density(out(f"density_ck{pos}.csv"), dens, coord_names,
                                  float(result.batch.times[i]))
        _write_final_state(out, scenario, result)
        exports.write_json(out("report.json"), result.report)
        t_write = _time.perf_counter()

        manifest = {
            "tool_version": __version__,
            "scenario": scenario.name,
            "scenario_hash": scenario_hash(resolved),
            "seed": scenario.ensemble.seed,
            "threads": threads,
            "outputs": {name: exports.sha256_file(os.path.join(out_dir, name)) for name in written},
            "timings_s": {
                "solve_and_transport": round(t_solve - t_start, 3),
                "write_artifacts": round(t_write - t_solve, 3),
            },
            "certification": result.report["certification"],
            "diagnostics": result.report["diagnostics"],
            "flags": result.report["flags"],
        }
        exports.write_json(os.path.join(out_dir, "run_manifest.json"), manifest)
    except Exception as exc:
        for name in written:
            path = os.path.join(out_dir, name)
            if os.path.exists(path):
                os.remove(path)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    certified = result.report["certification"] == "certified"
    print(f"{scenario.name}: {result.report['certification']}"
          + ("" if certified else f" ({', '.join(result.report['diagnostics'])})"))
    return EXIT_OK if certified else EXIT_DIAGNOSTICS


def _coordinate_names(scenario) -> list[str]:
    if scenario.mode_basis is not None:
        labels = scenario.mode_basis.quadrature_labels()
        idx = scenario.basis_coordinates or range(scenario.mode_basis.n_quadratures)
        return [f"q[{labels[i]}]" for i in idx]
    return list(scenario.axis_names())


def _write_final_state(out, scenario, result) -> None:
    if result.final_state is not None:
        exports.write_wavefunction(out("wavefunction_final.csv"), result.final_state)


def verify_manifest(run_dir: str) -> list[str]:
    """Check that every manifest-listed output exists with its checksum."""
    with open(os.path.join(run_dir, "run_manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    problems = []
    for name, digest in manifest["outputs"].items():
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            problems.append(f"missing output {name}")
        elif exports.sha256_file(path) != digest:
            problems.append(f"checksum mismatch for {name}")
    return problems


def cmd_export(run_dir: str, kind: str, t: float | None, out_path: str | None) -> int:
    art = RunArtifacts(run_dir)
    scenario = art.scenario
    times, positions, _ = art.bundle
    if t is None:
        t = float(times[0])
    if kind in ("A_T", "B", "E_T"):
        if scenario.mode_basis is None or scenario.lattice is None:
            raise ValueError("field export needs a scenario with mode_basis and lattice")
        idx = list(scenario.basis_coordinates or range(scenario.mode_basis.n_quadratures))
        full = np.zeros((times.size, scenario.mode_basis.n_quadratures))
        full[:, idx] = positions[:, 0, :]
        traj = Trajectory(times=times, points=full)
        i = int(np.argmin(np.abs(times - t)))
        if abs(times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a trajectory sample time")
        if kind == "A_T":
            snap = reconstruct_A(scenario.mode_basis, full[i], scenario.lattice, time=float(times[i]))
        elif kind == "B":
            snap = reconstruct_B(scenario.mode_basis, full[i], scenario.lattice, time=float(times[i]))
        else:
            snap = reconstruct_E_T(scenario.mode_basis, traj, float(times[i]), scenario.lattice)
        path = out_path or os.path.join(run_dir, f"field_{kind}_t{times[i]:g}.csv")
        exports.write_field_snapshot(path, snap)
        print(path)
        return EXIT_OK

    if kind == "psi":
        src = os.path.join(run_dir, "wavefunction_final.csv")
        if not os.path.exists(src):
            raise ValueError("run directory has no stored final wavefunction")
        path = out_path or src
        if path != src:
            with open(src, encoding="utf-8") as fh:
                exports.atomic_write_text(path, fh.read())
        print(path)
        return EXIT_OK

    if kind == "local":
        return _export_local(art, scenario, run_dir, out_path)
    raise ValueError(f"unknown export kind {kind!r}")


def _export_local(art: RunArtifacts, scenario, run_dir: str, out_path: str | None) -> int:
    """Local-expectation beable of the scenario's label-space operator."""
    if scenario.local_operator is None:
        raise ValueError("scenario declares no local_operator profiles")
    if scenario.lattice is None:
        raise ValueError("local export needs an evaluation lattice")
    if not isinstance(scenario.domain, FockDomain):
        raise ValueError("local export is available for Fock-domain runs")
    from .expressions import compile_expression
    from .solver_fock import FockWavefunction

    # rebuild the final state from the stored snapshot
    psi = _read_fock_wavefunction(os.path.join(run_dir, "wavefunction_final.csv"), scenario)
    times, positions, _ = art.bundle
    q = positions[-1, 0, :]
    pts = scenario.lattice.points()
    F = scenario.model.internal_dim
    if len(scenario.local_operator) != F:
        raise ValueError("one profile expression per fermionic label required")
    blocks = np.zeros(pts.shape[:-1] + (F, F), dtype=complex)
    for f, src in enumerate(scenario.local_operator):
        fn = compile_expression(src, ("x", "y", "z"))
        blocks[..., f, f] = np.broadcast_to(
            fn(x=pts[..., 0], y=pts[..., 1], z=pts[..., 2]), pts.shape[:-1]
        )
    view = make_view(psi, scenario.model)
    values = local_expectation(view, blocks, q, scenario.model)
    path = out_path or os.path.join(run_dir, "local_expectation_final.csv")
    lines = [f"# time: {psi.time:.17g}", "x,y,z,value"]
    flat_pts = pts.reshape(-1, 3)
    flat_vals = values.reshape(-1)
    for p, v in zip(flat_pts, flat_vals):
        lines.append(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},{v:.17g}")
    exports.atomic_write_text(path, "\n".join(lines) + "\n")
    print(path)
    return EXIT_OK


def _read_fock_wavefunction(path: str, scenario):
    from .solver_fock import FockWavefunction

    header, data, meta = exports.read_csv_table(path)
    n_max = tuple(int(n) for n in meta["n_max"].split(","))
    freqs = tuple(float(w) for w in meta["frequencies"].split(","))
    F = scenario.model.internal_dim
    shape = tuple(n + 1 for n in n_max) + (F,)
    amps = (data[:, -2] + 1j * data[:, -1]).reshape(shape)
    return FockWavefunction(freqs, n_max, amps, float(meta["time"]))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
