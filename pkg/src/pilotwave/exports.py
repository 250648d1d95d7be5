"""File artifacts: CSV/JSON writers with stable schemas and checksums.

Schemas (all CSV UTF-8, ``#``-prefixed metadata lines, then a header row):

* trajectories.csv — ``t,traj,<coord...>,node_flag``; full-resolution bundle
  of the first ``trajectory_bundle`` trajectories.  Field-model coordinate
  columns carry their (k, polarization) quadrature labels.
* ensemble_checkpoints.csv — ``t,traj,<coord...>`` for every trajectory at
  checkpoint times only.
* density_ck<i>.csv — ``<coord...>,rho`` joint density (dimension <= 2) or
  ``coordinate,q,rho`` stacked marginals (dimension >= 3).
* field_<kind>_t<t>.csv — ``x,y,z,Vx,Vy,Vz`` on the evaluation lattice.
* wavefunction_final.csv — grid: ``<index...>,<coord...>,component,re,im``;
  Fock: ``flat_index,<n...>,label,re,im`` with flat_index the C-order
  (lexicographic) position of the occupation tuple.

Data files never contain timestamps, so byte-identical reruns stay
byte-identical; wall-clock numbers live only in the run manifest.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .beables import FieldSnapshot
from .solver_fock import FockWavefunction
from .solver_grid import WavefunctionGrid


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_trajectory_bundle(path: str, batch, coord_names: list[str], bundle: int) -> None:
    """Full-resolution time series of the first ``bundle`` trajectories."""
    k = min(bundle, batch.size)
    lines = [f"# coordinates: {','.join(coord_names)}", f"t,traj,{','.join(coord_names)},node_flag"]
    T = batch.times.size
    for b in range(k):
        for i in range(T):
            coords = ",".join(_fmt(c) for c in batch.positions[i, b])
            lines.append(f"{_fmt(batch.times[i])},{b},{coords},{int(batch.node_flags[i, b])}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_checkpoint_positions(path: str, batch, ckpt_indices: list[int],
                               coord_names: list[str]) -> None:
    lines = [f"# coordinates: {','.join(coord_names)}", f"t,traj,{','.join(coord_names)}"]
    for i in ckpt_indices:
        t = batch.times[i]
        for b in range(batch.size):
            coords = ",".join(_fmt(c) for c in batch.positions[i, b])
            lines.append(f"{_fmt(t)},{b},{coords}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_density(path: str, density, coord_names: list[str], time: float) -> None:
    """Joint density for <= 2 coordinates, stacked marginals above."""
    from .ensemble import FockDensity

    lines = [f"# time: {_fmt(time)}"]
    if isinstance(density, FockDensity) and density.dimension > 2:
        lines.append("# kind: marginals")
        lines.append("coordinate,q,rho")
        for d in range(density.dimension):
            marg = density.marginal(d)
            for q, r in zip(marg.grids[0], marg.rho):
                lines.append(f"{d},{_fmt(q)},{_fmt(r)}")
    else:
        grid = density.to_grid() if isinstance(density, FockDensity) else density
        lines.append("# kind: joint")
        lines.append(f"{','.join(coord_names)},rho")
        mesh = np.meshgrid(*grid.grids, indexing="ij")
        flat = [m.ravel() for m in mesh] + [grid.rho.ravel()]
        for row in zip(*flat):
            lines.append(",".join(_fmt(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_field_snapshot(path: str, snapshot: FieldSnapshot) -> None:
    lines = [
        f"# kind: {snapshot.kind}",
        f"# time: {_fmt(snapshot.time)}",
        f"# basis: {snapshot.basis_hash}",
        f"# extent: {','.join(_fmt(e) for e in snapshot.lattice.extent)}",
        f"# shape: {','.join(str(s) for s in snapshot.lattice.shape)}",
        "x,y,z,Vx,Vy,Vz",
    ]
    pts = snapshot.lattice.points().reshape(-1, 3)
    vals = snapshot.values.reshape(-1, 3)
    for p, v in zip(pts, vals):
        lines.append(",".join(_fmt(c) for c in (*p, *v)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_wavefunction(path: str, psi) -> None:
    if isinstance(psi, WavefunctionGrid):
        _write_grid_wavefunction(path, psi)
    elif isinstance(psi, FockWavefunction):
        _write_fock_wavefunction(path, psi)
    else:
        raise TypeError(f"cannot export {type(psi).__name__}")


def _write_grid_wavefunction(path: str, psi: WavefunctionGrid) -> None:
    names = [ax.name for ax in psi.axes]
    lines = [f"# time: {_fmt(psi.time)}"]
    for ax in psi.axes:
        lines.append(f"# axis: {ax.name},{_fmt(ax.min)},{_fmt(ax.max)},{ax.points}")
    idx_names = [f"i_{n}" for n in names]
    lines.append(f"{','.join(idx_names)},{','.join(names)},component,re,im")
    grids = psi.grids()
    it = np.ndindex(*psi.amplitudes.shape[:-1])
    for idx in it:
        coords = [grids[d][idx[d]] for d in range(len(grids))]
        for f in range(psi.internal_dim):
            a = psi.amplitudes[idx + (f,)]
            row = [str(i) for i in idx] + [_fmt(c) for c in coords] + [str(f), _fmt(a.real), _fmt(a.imag)]
            lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _write_fock_wavefunction(path: str, psi: FockWavefunction) -> None:
    lines = [
        f"# time: {_fmt(psi.time)}",
        f"# frequencies: {','.join(_fmt(w) for w in psi.frequencies)}",
        f"# n_max: {','.join(str(n) for n in psi.n_max)}",
        "# ordering: occupation tuples lexicographic (C order), label fastest",
    ]
    n_names = [f"n_{j}" for j in range(psi.mode_count)]
    lines.append(f"flat_index,{','.join(n_names)},label,re,im")
    flat = 0
    for idx in np.ndindex(*psi.amplitudes.shape[:-1]):
        for f in range(psi.fermion_dim):
            a = psi.amplitudes[idx + (f,)]
            row = [str(flat)] + [str(i) for i in idx] + [str(f), _fmt(a.real), _fmt(a.imag)]
            lines.append(",".join(row))
            flat += 1
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Readers (round-trip support for export checks and downstream tools)


def read_csv_table(path: str) -> tuple[list[str], np.ndarray, dict]:
    """Read a schema CSV: returns (column names, float matrix, metadata)."""
    meta: dict = {}
    header: list[str] | None = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if ":" in line:
                    key, val = line[1:].split(":", 1)
                    meta[key.strip()] = val.strip()
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
    if header is None:
        raise ValueError(f"{path} has no header row")
    return header, np.asarray(rows, dtype=float), meta


def load_trajectory_bundle(path: str):
    """Returns (times, positions (T, K, D), node_flags) from trajectories.csv."""
    header, data, _ = read_csv_table(path)
    d = len(header) - 3
    traj_ids = np.unique(data[:, 1]).astype(int)
    times = np.unique(data[:, 0])
    times.sort()
    K = traj_ids.size
    T = times.size
    positions = np.full((T, K, d), np.nan)
    flags = np.zeros((T, K), dtype=bool)
    t_index = {t: i for i, t in enumerate(times)}
    for row in data:
        i = t_index[row[0]]
        b = int(row[1])
        positions[i, b] = row[2 : 2 + d]
        flags[i, b] = bool(row[-1])
    return times, positions, flags


def load_checkpoint_positions(path: str):
    """Returns (checkpoint times, dict t -> (B, D) positions)."""
    header, data, _ = read_csv_table(path)
    d = len(header) - 2
    times = np.unique(data[:, 0])
    times.sort()
    out = {}
    for t in times:
        sel = data[data[:, 0] == t]
        order = np.argsort(sel[:, 1])
        out[float(t)] = sel[order, 2 : 2 + d]
    return times, out
