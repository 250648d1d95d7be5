"""Render plots from exported run artifacts.

Every renderer consumes the documented CSV/JSON files only; nothing is
recomputed from wavefunctions. Images are deterministic for fixed inputs
(fixed figure geometry, no timestamps).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import SchemaError, load_checkpoints, load_density, load_field, load_report, load_trajectories

UNIT = "natural units"
_DPI = 130


@dataclass(frozen=True)
class PlotJob:
    run_dir: str
    kind: str                      # trajectories | equivariance | branches | field
    output: str
    time: float | None = None      # checkpoint selector (equivariance)
    field_file: str | None = None  # field snapshot path (field)


def plot(job: PlotJob) -> str:
    """Dispatch on the job kind; returns the written image path."""
    if job.kind == "trajectories":
        return plot_trajectories(job.run_dir, job.output)
    if job.kind == "equivariance":
        return plot_equivariance(job.run_dir, job.output, time=job.time)
    if job.kind == "branches":
        return plot_branches(job.run_dir, job.output)
    if job.kind == "field":
        if job.field_file is None:
            raise SchemaError("field plots need a field snapshot file (field_file)")
        return plot_field(job.field_file, job.output)
    raise SchemaError(f"unknown plot kind {job.kind!r}")


def _save(fig, output: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
    fig.savefig(output, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    return output


def plot_trajectories(run_dir: str, output: str, max_lines: int = 64) -> str:
    """Bundle fan: each beable coordinate against time."""
    times, positions, flags, coords = load_trajectories(run_dir)
    report = load_report(run_dir)
    k = min(max_lines, positions.shape[1])
    d = len(coords)
    fig, axes = plt.subplots(d, 1, figsize=(7.0, 2.6 * d), sharex=True, squeeze=False)
    for c in range(d):
        ax = axes[c, 0]
        ax.plot(times, positions[:, :k, c], color="black", alpha=0.25, lw=0.7)
        clamped = np.any(flags[:, :k], axis=1)
        if np.any(clamped):
            ax.plot(times[clamped], np.zeros(np.sum(clamped)), "r|", ms=10,
                    label="node events")
            ax.legend(loc="upper right", fontsize=8)
        ax.set_ylabel(f"{coords[c]} [{UNIT}]")
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel(f"t [{UNIT}]")
    fig.suptitle(f"{report['scenario']}: trajectory bundle ({k} of {positions.shape[1]})")
    fig.tight_layout()
    return _save(fig, output)


def _nearest_checkpoint(report: dict, times: np.ndarray, time: float | None) -> int:
    if time is None:
        return 0
    return int(np.argmin(np.abs(times - time)))


def plot_equivariance(run_dir: str, output: str, time: float | None = None, bins: int = 60) -> str:
    """Ensemble histogram against the exported rho^Psi at one checkpoint."""
    report = load_report(run_dir)
    times, checkpoints, coords = load_checkpoints(run_dir)
    idx = _nearest_checkpoint(report, times, time)
    t = float(times[idx])
    samples = checkpoints[t]
    kind, payload, _ = load_density(run_dir, idx)
    ck_report = report["checkpoints"][idx]
    floor = ck_report.get("noise_floor")
    dist = ck_report.get("distance")
    subtitle = f"t = {t:g}"
    if dist is not None and floor is not None:
        subtitle += f"; distance {dist:.3f}, noise floor {floor:.3f}"

    if kind == "joint" and len(payload[2]) == 1:
        (grid,), rho, names = payload
        fig, ax = plt.subplots(figsize=(7.0, 4.2))
        ax.hist(samples[:, 0], bins=bins, density=True, alpha=0.45,
                color="steelblue", label="ensemble")
        ax.plot(grid, rho, "k-", lw=1.4, label=r"$\rho^\Psi$")
        ax.set_xlabel(f"{names[0]} [{UNIT}]")
        ax.set_ylabel("density")
        ax.legend()
        ax.set_title(f"{report['scenario']}: equivariance overlay ({subtitle})")
        fig.tight_layout()
        return _save(fig, output)

    if kind == "joint":
        grids, rho, names = payload
        fig, axes = plt.subplots(1, 2, figsize=(10.0, 4.2), sharex=True, sharey=True)
        extent = (grids[0][0], grids[0][-1], grids[1][0], grids[1][-1])
        axes[0].hist2d(samples[:, 0], samples[:, 1], bins=bins, density=True, cmap="viridis")
        axes[0].set_title("ensemble")
        axes[1].imshow(rho.T, origin="lower", aspect="auto", extent=extent, cmap="viridis")
        axes[1].set_title(r"$\rho^\Psi$")
        for ax in axes:
            ax.set_xlabel(f"{names[0]} [{UNIT}]")
        axes[0].set_ylabel(f"{names[1]} [{UNIT}]")
        fig.suptitle(f"{report['scenario']}: equivariance ({subtitle})")
        fig.tight_layout()
        return _save(fig, output)

    entries = payload  # marginals
    fig, axes = plt.subplots(len(entries), 1, figsize=(7.0, 2.4 * len(entries)), squeeze=False)
    for row, (c, grid, rho) in enumerate(entries):
        ax = axes[row, 0]
        ax.hist(samples[:, c], bins=bins, density=True, alpha=0.45, color="steelblue")
        ax.plot(grid, rho, "k-", lw=1.2)
        ax.set_ylabel("density")
        ax.set_xlabel(f"{coords[c]} [{UNIT}]")
    fig.suptitle(f"{report['scenario']}: marginal equivariance ({subtitle})")
    fig.tight_layout()
    return _save(fig, output)


def plot_branches(run_dir: str, output: str) -> str:
    """Declared-branch weights vs empirical membership frequencies."""
    report = load_report(run_dir)
    branches = report.get("branches")
    if not branches or branches.get("final_weights") is None:
        raise SchemaError(f"{run_dir}/report.json: field 'branches.final_weights' absent "
                          "(scenario declares no branches)")
    weights = np.asarray(branches["final_weights"], dtype=float)
    counts = np.asarray(branches["final_counts"], dtype=float)
    freqs = counts / counts.sum()
    labels = [f"branch {i}" for i in range(weights.size)]
    x = np.arange(weights.size)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(x - 0.18, weights, width=0.36, label=r"$|c_k|^2$ (weights)", color="dimgray")
    ax.bar(x + 0.18, freqs, width=0.36, label="ensemble frequency", color="steelblue")
    n = int(counts.sum())
    se = np.sqrt(np.clip(weights * (1 - weights), 1e-300, None) / n)
    ax.errorbar(x + 0.18, freqs, yerr=3 * se, fmt="none", ecolor="black",
                capsize=4, label="3 binomial SE")
    ax.set_xticks(x, labels)
    ax.set_ylabel("probability")
    ax.legend(fontsize=8)
    ax.set_title(f"{report['scenario']}: branch statistics (N = {n})")
    fig.tight_layout()
    return _save(fig, output)


def plot_field(field_file: str, output: str, plane_index: int = 0) -> str:
    """Quiver of the in-plane components plus |V| heatmap on a z-slice."""
    points, vectors, meta = load_field(field_file)
    nx, ny, nz = meta["shape"]
    pts = points.reshape(nx, ny, nz, 3)
    vec = vectors.reshape(nx, ny, nz, 3)
    if not 0 <= plane_index < nz:
        raise SchemaError(f"{field_file}: z-slice {plane_index} outside lattice shape {meta['shape']}")
    x = pts[:, 0, plane_index, 0]
    y = pts[0, :, plane_index, 1]
    vxy = vec[:, :, plane_index, :2]
    mag = np.linalg.norm(vec[:, :, plane_index], axis=-1)

    fig, axes = plt.subplots(1, 2, figsize=(10.0, 4.4))
    im = axes[0].imshow(mag.T, origin="lower", aspect="auto",
                        extent=(x[0], x[-1], y[0], y[-1]), cmap="magma")
    fig.colorbar(im, ax=axes[0], label=f"|{meta['kind']}| [{UNIT}]")
    axes[0].set_title(f"|{meta['kind']}|, z-slice {plane_index}")
    gx, gy = np.meshgrid(x, y, indexing="ij")
    # an identically zero field breaks quiver's auto-scaling
    scale = None if np.max(mag) > 0 else 1.0
    axes[1].quiver(gx, gy, vxy[..., 0], vxy[..., 1], mag, cmap="magma", scale=scale)
    axes[1].set_title(f"{meta['kind']} in-plane components")
    for ax in axes:
        ax.set_xlabel(f"x [{UNIT}]")
        ax.set_ylabel(f"y [{UNIT}]")
    fig.suptitle(f"{meta['kind']} at t = {float(meta['time']):g} (basis {meta.get('basis', '?')})")
    fig.tight_layout()
    return _save(fig, output)
