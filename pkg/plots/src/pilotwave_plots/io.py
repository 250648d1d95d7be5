"""Readers for the simulator's exported artifacts.

These parse the documented CSV/JSON schemas directly; nothing here imports
or recomputes simulator physics. Schema violations raise SchemaError with
the offending file and field named.
"""

from __future__ import annotations

import json
import os

import numpy as np


class SchemaError(ValueError):
    """An artifact does not match its documented schema."""


def read_table(path: str):
    """Parse a schema CSV: '#' metadata lines, header row, float rows."""
    if not os.path.exists(path):
        raise SchemaError(f"{path}: file not found")
    meta: dict = {}
    header = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
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
            parts = line.split(",")
            if len(parts) != len(header):
                raise SchemaError(
                    f"{path}:{line_no}: expected {len(header)} columns {header}, got {len(parts)}"
                )
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise SchemaError(f"{path}:{line_no}: non-numeric value ({exc})") from exc
    if header is None:
        raise SchemaError(f"{path}: missing header row")
    return header, np.asarray(rows, dtype=float), meta


def _require_columns(path: str, header: list[str], required: list[str]) -> None:
    for col in required:
        if col not in header:
            raise SchemaError(f"{path}: missing required column {col!r} (have {header})")


def load_report(run_dir: str) -> dict:
    path = os.path.join(run_dir, "report.json")
    if not os.path.exists(path):
        raise SchemaError(f"{path}: file not found")
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    for field in ("scenario", "checkpoints", "certification"):
        if field not in report:
            raise SchemaError(f"{path}: missing field {field!r}")
    return report


def load_trajectories(run_dir: str):
    """(times, positions (T, K, D), node_flags, coordinate names)."""
    path = os.path.join(run_dir, "trajectories.csv")
    header, data, _ = read_table(path)
    _require_columns(path, header, ["t", "traj", "node_flag"])
    if header[0] != "t" or header[1] != "traj" or header[-1] != "node_flag":
        raise SchemaError(f"{path}: expected columns t,traj,<coords...>,node_flag, got {header}")
    coords = header[2:-1]
    if not coords:
        raise SchemaError(f"{path}: no coordinate columns")
    d = len(coords)
    times = np.unique(data[:, 0])
    traj_ids = np.unique(data[:, 1]).astype(int)
    positions = np.full((times.size, traj_ids.size, d), np.nan)
    flags = np.zeros((times.size, traj_ids.size), dtype=bool)
    t_index = {t: i for i, t in enumerate(times)}
    for row in data:
        i = t_index[row[0]]
        b = int(row[1])
        positions[i, b] = row[2:-1]
        flags[i, b] = bool(row[-1])
    if np.any(np.isnan(positions)):
        raise SchemaError(f"{path}: missing (t, traj) combinations")
    return times, positions, flags, coords


def load_checkpoints(run_dir: str):
    """(checkpoint times, {t: (B, D) positions}, coordinate names)."""
    path = os.path.join(run_dir, "ensemble_checkpoints.csv")
    header, data, _ = read_table(path)
    _require_columns(path, header, ["t", "traj"])
    coords = header[2:]
    times = np.unique(data[:, 0])
    out = {}
    for t in times:
        sel = data[data[:, 0] == t]
        order = np.argsort(sel[:, 1])
        out[float(t)] = sel[order, 2:]
    return times, out, coords


def load_density(run_dir: str, index: int):
    """Checkpoint density: ('joint', grids, rho) or ('marginals', entries).

    Joint 1-D: grids=[x], rho (n,); joint 2-D: grids=[x, y], rho (nx, ny).
    Marginals: entries = list of (coordinate index, q grid, rho values).
    """
    path = os.path.join(run_dir, f"density_ck{index}.csv")
    header, data, meta = read_table(path)
    kind = meta.get("kind")
    if kind == "marginals":
        _require_columns(path, header, ["coordinate", "q", "rho"])
        entries = []
        for c in np.unique(data[:, 0]).astype(int):
            sel = data[data[:, 0] == c]
            entries.append((int(c), sel[:, 1], sel[:, 2]))
        return "marginals", entries, float(meta.get("time", "nan"))
    if kind != "joint":
        raise SchemaError(f"{path}: unknown density kind {kind!r} in metadata")
    if header[-1] != "rho":
        raise SchemaError(f"{path}: last column must be 'rho', got {header[-1]!r}")
    coords = header[:-1]
    if len(coords) == 1:
        return "joint", ([data[:, 0]], data[:, 1], coords), float(meta.get("time", "nan"))
    if len(coords) == 2:
        x = np.unique(data[:, 0])
        y = np.unique(data[:, 1])
        if x.size * y.size != data.shape[0]:
            raise SchemaError(f"{path}: rows do not form a full tensor grid")
        rho = data[:, 2].reshape(x.size, y.size)
        return "joint", ([x, y], rho, coords), float(meta.get("time", "nan"))
    raise SchemaError(f"{path}: joint densities support 1 or 2 coordinates, got {len(coords)}")


def load_field(path: str):
    """Field snapshot: (points (N, 3), vectors (N, 3), metadata)."""
    header, data, meta = read_table(path)
    _require_columns(path, header, ["x", "y", "z", "Vx", "Vy", "Vz"])
    for field in ("kind", "time", "shape"):
        if field not in meta:
            raise SchemaError(f"{path}: missing metadata line {field!r}")
    shape = tuple(int(s) for s in meta["shape"].split(","))
    return data[:, :3], data[:, 3:], {**meta, "shape": shape}
