"""Render every plot kind from real simulator outputs (file interface only).

The fixture drives the pilotwave CLI as a subprocess to produce run
directories, then the renderers consume the artifacts. Reduced sample
counts keep the runs fast; the schemas are identical to full-scale runs.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from pilotwave_plots import PlotJob, SchemaError, plot
from pilotwave_plots.io import load_checkpoints, load_density, load_report

FAST = ["--override", "ensemble.samples=400", "--override", "ensemble.checkpoints=3"]


def _cli(*args) -> int:
    return subprocess.run([sys.executable, "-m", "pilotwave.cli", *args],
                          capture_output=True, text=True).returncode


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """One run per bundled scenario (reduced samples), plus a field export."""
    base = tmp_path_factory.mktemp("runs")
    listing = subprocess.run([sys.executable, "-m", "pilotwave.cli", "list"],
                             capture_output=True, text=True)
    names = [line.strip() for line in listing.stdout.splitlines()
             if line.startswith("  ") and "fixtures" not in line]
    # the listing prints scenarios first, then fixtures with the same names
    names = sorted(set(names))
    dirs = {}
    for name in names:
        out = base / name
        code = _cli("run", name, "-o", str(out), *FAST)
        assert code in (0, 2), f"{name} run failed"
        dirs[name] = str(out)
    assert _cli("export", dirs["coherent_field"], "--kind", "B", "--time", "1.0") == 0
    assert _cli("export", dirs["vacuum_pinned"], "--kind", "E_T", "--time", "0.5") == 0
    return dirs


def test_all_fixture_outputs_render_without_schema_errors(runs, tmp_path):
    rendered = 0
    for name, run_dir in runs.items():
        out = tmp_path / name
        plot(PlotJob(run_dir, "trajectories", str(out / "fan.png")))
        plot(PlotJob(run_dir, "equivariance", str(out / "overlay.png")))
        report = load_report(run_dir)
        if (report.get("branches") or {}).get("final_weights"):
            plot(PlotJob(run_dir, "branches", str(out / "branches.png")))
        for entry in os.listdir(run_dir):
            if entry.startswith("field_"):
                plot(PlotJob(run_dir, "field", str(out / f"{entry}.png"),
                             field_file=os.path.join(run_dir, entry)))
        for img in out.iterdir():
            assert img.stat().st_size > 0
            rendered += 1
    assert rendered >= 2 * len(runs)


def test_equivariance_overlay_consistent_with_reported_floor(runs):
    """Histogram deviation at t=0 sits within the primary's noise floor.

    Recomputed purely from exported numbers: checkpoint positions vs the
    exported density curve, compared against report.json's floor.
    """
    run_dir = runs["free_gaussian"]
    report = load_report(run_dir)
    times, checkpoints, _ = load_checkpoints(run_dir)
    samples = checkpoints[float(times[0])][:, 0]
    kind, ((grid,), rho, _), _ = load_density(run_dir, 0)
    assert kind == "joint"
    ck = report["checkpoints"][0]
    edges = np.linspace(grid[0], grid[-1], 41)
    hist, _ = np.histogram(samples, bins=edges, density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    ref = np.interp(centers, grid, rho)
    l1 = float(np.sum(np.abs(hist - ref)) * (edges[1] - edges[0]))
    assert l1 <= 2.0 * ck["noise_floor"] + 0.1
    assert ck["distance"] <= 2.0 * ck["noise_floor"]


def test_field_heatmap_nonzero_for_emitting_toy(runs, tmp_path):
    """The coherent field's exported B snapshot renders a nonzero pattern."""
    run_dir = runs["coherent_field"]
    field = next(f for f in os.listdir(run_dir) if f.startswith("field_B"))
    from pilotwave_plots.io import load_field

    _, vectors, meta = load_field(os.path.join(run_dir, field))
    assert meta["kind"] == "B"
    assert np.max(np.abs(vectors)) > 1e-3
    out = plot(PlotJob(run_dir, "field", str(tmp_path / "b.png"),
                       field_file=os.path.join(run_dir, field)))
    assert os.path.getsize(out) > 0


def test_images_deterministic(runs, tmp_path):
    run_dir = runs["free_gaussian"]
    a = plot(PlotJob(run_dir, "trajectories", str(tmp_path / "a.png")))
    b = plot(PlotJob(run_dir, "trajectories", str(tmp_path / "b.png")))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_schema_error_names_missing_column(runs, tmp_path):
    run_dir = runs["free_gaussian"]
    broken = tmp_path / "broken"
    broken.mkdir()
    src = open(os.path.join(run_dir, "trajectories.csv")).read().splitlines()
    header = src[1].split(",")
    drop = [",".join(r.split(",")[:-1]) for r in src[1:]]
    (broken / "trajectories.csv").write_text("\n".join([src[0]] + drop) + "\n")
    with pytest.raises(SchemaError, match="node_flag"):
        plot(PlotJob(str(broken), "trajectories", str(tmp_path / "x.png")))


def test_branches_plot_refused_without_declared_branches(runs, tmp_path):
    with pytest.raises(SchemaError, match="branches.final_weights"):
        plot(PlotJob(runs["free_gaussian"], "branches", str(tmp_path / "nope.png")))


def test_cli_round_trip(runs, tmp_path):
    out = tmp_path / "cli.png"
    code = subprocess.run([sys.executable, "-m", "pilotwave_plots.cli",
                           runs["harmonic_ground"], "--kind", "equivariance",
                           "-o", str(out)], capture_output=True, text=True).returncode
    assert code == 0
    assert out.stat().st_size > 0


def test_cli_schema_error_exit(runs, tmp_path):
    res = subprocess.run([sys.executable, "-m", "pilotwave_plots.cli",
                          str(tmp_path), "--kind", "trajectories",
                          "-o", str(tmp_path / "x.png")], capture_output=True, text=True)
    assert res.returncode == 1
    assert "schema error" in res.stderr
