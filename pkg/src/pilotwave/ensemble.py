"""Equilibrium sampling, equivariance metrics, and full ensemble runs.

Sampling is inverse-CDF on a piecewise-constant cell model for beable
spaces of dimension <= 2 and Metropolis random walk (with split-chain
R-hat certification) above that.  All randomness flows from the scenario
seed through numpy SeedSequence spawning into counter-based Philox
streams, so serial and parallel runs produce identical output.

The equivariance statistic is the histogram L1 distance between the
empirical ensemble distribution and rho^Psi (range [0, 2]): joint
histogram up to 2 dimensions, averaged single-coordinate marginals above.
Bin widths follow Scott's rule computed from the reference density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import states
from .beables import BranchDecomposition, build_branches
from .guidance import (
    FockView,
    GridView,
    TrajectoryBatch,
    integrate_trajectories,
    velocity_and_density,
)
from .model import GridDomain, Scenario, validate_scenario
from .solver_fock import (
    FockPropagator,
    FockWavefunction,
    assemble_fock_hamiltonian,
    mode_marginal_density,
    tensor_grid_values,
)
from .solver_grid import GridPropagator, WavefunctionGrid

MIN_ENSEMBLE_FOR_DISTANCE = 100
RHAT_THRESHOLD = 1.05
BOUNDARY_CONTAMINATION_LIMIT = 1e-6
LEAKAGE_LIMIT = 1e-6


class EnsembleError(RuntimeError):
    pass


class ScenarioInvalid(EnsembleError):
    def __init__(self, diagnostics):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics))


def _rng(seed_seq) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_seq))


# ---------------------------------------------------------------------------
# Density models


class GridDensity:
    """Normalized density on a uniform tensor grid of cell centers."""

    def __init__(self, grids: list[np.ndarray], rho: np.ndarray):
        self.grids = [np.asarray(g, dtype=float) for g in grids]
        self.steps = [g[1] - g[0] for g in self.grids]
        self.cell_volume = float(np.prod(self.steps))
        rho = np.asarray(rho, dtype=float).clip(min=0.0)
        total = rho.sum() * self.cell_volume
        if total <= 0:
            raise EnsembleError("density has no mass")
        self.rho = rho / total
        self._flat_masses = (self.rho * self.cell_volume).ravel()
        self._cdf = np.cumsum(self._flat_masses)
        self._cdf /= self._cdf[-1]

    @property
    def dimension(self) -> int:
        return len(self.grids)

    def extent(self, d: int) -> tuple[float, float]:
        g = self.grids[d]
        return float(g[0] - self.steps[d] / 2), float(g[-1] + self.steps[d] / 2)

    def std(self, d: int) -> float:
        marg = self.marginal(d)
        g = marg.grids[0]
        w = marg.rho * marg.cell_volume
        mean = float(np.sum(w * g))
        return float(np.sqrt(max(np.sum(w * (g - mean) ** 2), 1e-300)))

    def marginal(self, d: int) -> "GridDensity":
        if self.dimension == 1 and d == 0:
            return self
        other = tuple(i for i in range(self.dimension) if i != d)
        dv = float(np.prod([self.steps[i] for i in other]))
        return GridDensity([self.grids[d]], self.rho.sum(axis=other) * dv)

    def bin_masses(self, edges: list[np.ndarray]) -> np.ndarray:
        centers = np.meshgrid(*self.grids, indexing="ij")
        pts = np.stack([c.ravel() for c in centers], axis=-1)
        h, _ = np.histogramdd(pts, bins=edges, weights=self._flat_masses)
        return h

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Inverse-CDF draw from the piecewise-constant cell model."""
        flat = np.searchsorted(self._cdf, rng.uniform(size=n), side="right")
        flat = np.minimum(flat, self._cdf.size - 1)
        idx = np.unravel_index(flat, self.rho.shape)
        out = np.empty((n, self.dimension))
        for d in range(self.dimension):
            jitter = rng.uniform(-0.5, 0.5, size=n)
            out[:, d] = self.grids[d][idx[d]] + jitter * self.steps[d]
        return out


class FockDensity:
    """Density model backed by pointwise Fock evaluation."""

    def __init__(self, psi: FockWavefunction):
        self.psi = psi
        self._grid = None
        self._marginals: dict[int, GridDensity] = {}
        self.last_rhat: float | None = None

    @property
    def dimension(self) -> int:
        return self.psi.mode_count

    def _mode_grid(self, j: int) -> np.ndarray:
        return self.psi.mode_grid(j, points=max(257, 8 * self.psi.n_max[j] + 65))

    def to_grid(self) -> GridDensity:
        if self.dimension > 2:
            raise EnsembleError("joint grid evaluation limited to 2 coordinates")
        if self._grid is None:
            grids = [self._mode_grid(j) for j in range(self.dimension)]
            vals = tensor_grid_values(self.psi, grids)
            self._grid = GridDensity(grids, np.sum(np.abs(vals) ** 2, axis=-1))
        return self._grid

    def marginal(self, d: int) -> GridDensity:
        if d not in self._marginals:
            g = self._mode_grid(d)
            self._marginals[d] = GridDensity([g], mode_marginal_density(self.psi, d, g))
        return self._marginals[d]

    def std(self, d: int) -> float:
        return self.marginal(d).std(0)

    def extent(self, d: int) -> tuple[float, float]:
        return self.marginal(d).extent(0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.dimension <= 2:
            return self.to_grid().sample(n, rng)
        return self._metropolis(n, rng)

    def _metropolis(self, n: int, rng: np.random.Generator) -> np.ndarray:
        from .solver_fock import position_density

        scales = np.array([self.std(d) for d in range(self.dimension)])
        start = np.zeros(self.dimension)
        samples, rhat = metropolis_sample(
            lambda x: position_density(self.psi, x), start, scales, n, rng
        )
        self.last_rhat = rhat
        return samples

    def sample_sets(self, n: int, replicates: int, rng: np.random.Generator) -> list[np.ndarray]:
        """Near-independent sample sets; one pooled MCMC run above 2-D."""
        if self.dimension <= 2:
            grid = self.to_grid()
            return [grid.sample(n, rng) for _ in range(replicates)]
        pool = self._metropolis(n * replicates, rng)
        return [pool[r::replicates][:n] for r in range(replicates)]


def density_model_for(wavefunction) -> GridDensity | FockDensity:
    if isinstance(wavefunction, WavefunctionGrid):
        return GridDensity(wavefunction.grids(), wavefunction.density())
    if isinstance(wavefunction, FockWavefunction):
        return FockDensity(wavefunction)
    raise EnsembleError(f"no density model for {type(wavefunction).__name__}")


# ---------------------------------------------------------------------------
# Metropolis sampling with split-chain certification


def metropolis_sample(density_fn, start: np.ndarray, scales: np.ndarray, n: int,
                      rng: np.random.Generator, walkers: int = 64, burn: int = 400,
                      thin: int = 8, min_per_walker: int = 60) -> tuple[np.ndarray, float]:
    """Random-walk Metropolis; returns (samples, split-chain R-hat).

    ``density_fn`` evaluates the (unnormalized) target on (B, D) points.
    Walkers start spread by the proposal scale around ``start``; every
    walker keeps at least ``min_per_walker`` thinned draws so the split
    R-hat diagnostic has usable chains.
    """
    D = start.size
    x = start[None, :] + scales[None, :] * rng.standard_normal((walkers, D))
    logp = np.log(np.maximum(density_fn(x), 1e-300))
    per_walker = max(int(np.ceil(n / walkers)), min_per_walker)
    kept = np.empty((per_walker, walkers, D))
    step = 0
    prop_scale = 2.4 / np.sqrt(D)  # optimal random-walk scaling
    for it in range(burn + per_walker * thin):
        prop = x + prop_scale * scales[None, :] * rng.standard_normal((walkers, D))
        logq = np.log(np.maximum(density_fn(prop), 1e-300))
        accept = np.log(rng.uniform(size=walkers)) < (logq - logp)
        x[accept] = prop[accept]
        logp[accept] = logq[accept]
        if it >= burn and (it - burn) % thin == thin - 1:
            kept[step] = x
            step += 1
    rhat = _split_rhat(kept)
    # interleave walkers so any prefix of the output mixes all chains
    return kept.reshape(-1, D)[:n], rhat


def _split_rhat(chains: np.ndarray) -> float:
    """Gelman-Rubin statistic over split walker chains, max across coords."""
    T, W, D = chains.shape
    if T < 4:
        return np.inf
    half = T // 2
    split = np.concatenate([chains[:half], chains[half : 2 * half]], axis=1)  # (half, 2W, D)
    m = split.shape[1]
    means = split.mean(axis=0)            # (2W, D)
    variances = split.var(axis=0, ddof=1)  # (2W, D)
    grand = means.mean(axis=0)
    b = half / (m - 1) * np.sum((means - grand) ** 2, axis=0)
    w = variances.mean(axis=0)
    var_plus = (half - 1) / half * w + b / half
    with np.errstate(invalid="ignore", divide="ignore"):
        rhat = np.sqrt(var_plus / np.where(w > 0, w, np.inf))
    return float(np.max(np.nan_to_num(rhat, nan=1.0)))


def sample_equilibrium(wavefunction, n: int, seed: int) -> np.ndarray:
    """n independent draws from the equilibrium density of a wavefunction."""
    if n < 1:
        raise EnsembleError("need at least one sample")
    model = density_model_for(wavefunction)
    rng = _rng(np.random.SeedSequence(seed))
    return model.sample(n, rng)


# ---------------------------------------------------------------------------
# Equivariance distance


def _scott_edges(density, d: int, n: int, dim: int) -> np.ndarray:
    lo, hi = density.extent(d)
    h = 3.49 * max(density.std(d), 1e-12) * n ** (-1.0 / (2 + dim))
    bins = int(np.clip(np.ceil((hi - lo) / h), 8, 512 if dim == 1 else 96))
    return np.linspace(lo, hi, bins + 1)


def equivariance_distance(samples: np.ndarray, density) -> tuple[float, dict]:
    """Histogram L1 distance in [0, 2] between samples and a density model."""
    pts = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dim = pts.shape
    if n < MIN_ENSEMBLE_FOR_DISTANCE:
        raise EnsembleError(
            f"equivariance distance needs >= {MIN_ENSEMBLE_FOR_DISTANCE} trajectories, got {n}"
        )
    if dim <= 2:
        edges = [_scott_edges(density, d, n, dim) for d in range(dim)]
        ref = density.bin_masses(edges) if isinstance(density, GridDensity) else density.to_grid().bin_masses(edges)
        emp, _ = np.histogramdd(pts, bins=edges)
        emp = emp / n
        # sample mass escaping the binned domain counts as discrepancy
        outside = 1.0 - emp.sum()
        dist = float(np.sum(np.abs(emp - ref)) + outside)
        meta = {"rule": "scott", "mode": "joint",
                "bins": [len(e) - 1 for e in edges],
                "bin_widths": [float(e[1] - e[0]) for e in edges]}
        return dist, meta
    dists = []
    bins = []
    widths = []
    for d in range(dim):
        marg = density.marginal(d)
        edges = [_scott_edges(marg, 0, n, 1)]
        ref = marg.bin_masses(edges)
        emp, _ = np.histogramdd(pts[:, d : d + 1], bins=edges)
        emp = emp / n
        outside = 1.0 - emp.sum()
        dists.append(float(np.sum(np.abs(emp - ref)) + outside))
        bins.append(len(edges[0]) - 1)
        widths.append(float(edges[0][1] - edges[0][0]))
    meta = {"rule": "scott", "mode": "marginals", "bins": bins, "bin_widths": widths}
    return float(np.mean(dists)), meta


def bootstrap_noise_floor(density, n: int, rng: np.random.Generator,
                          replicates: int = 16) -> dict:
    """Distance statistics of fresh equilibrium draws against the density."""
    if isinstance(density, FockDensity):
        sets = density.sample_sets(n, replicates, rng)
    else:
        sets = [density.sample(n, rng) for _ in range(replicates)]
    dists = [equivariance_distance(fresh, density)[0] for fresh in sets]
    mean = float(np.mean(dists))
    std = float(np.std(dists))
    return {"mean": mean, "std": std, "floor": mean + 3.0 * std, "replicates": replicates}


# ---------------------------------------------------------------------------
# Evolution driver


class _StreamingDriver:
    """Owns the evolving wavefunction; hands out immutable views on demand."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.model = scenario.model
        self.dt = scenario.dt
        self._step = 0
        self._views: dict[int, object] = {}
        self.norm_drift_max = 0.0
        self.boundary_contamination = 0.0
        self.leakage_max = 0.0
        self.snapshots: dict[int, object] = {}
        self.snapshot_steps: set[int] = set()

        if isinstance(scenario.domain, GridDomain):
            self.psi = states.build_grid_state(scenario)
            self.prop = GridPropagator(self.model, scenario.domain.axes, scenario.dt, scenario.scheme)
            self.ham = self.prop.ham
            self.is_grid = True
        else:
            self.psi = states.build_fock_state(scenario)
            self.prop = FockPropagator(self.model, scenario.domain.n_max, scenario.dt)
            self.ham = assemble_fock_hamiltonian(self.model, scenario.domain.n_max)
            self.is_grid = False
        self._norm_prev = self.psi.norm_sq()
        self._observe()

    def energy(self) -> float:
        if self.is_grid:
            return self.ham.expectation(self.psi)
        vec = self.psi.amplitudes.ravel()
        return float(np.real(np.vdot(vec, self.ham @ vec)))

    def _observe(self):
        norm = self.psi.norm_sq()
        self.norm_drift_max = max(self.norm_drift_max, abs(norm - self._norm_prev))
        self._norm_prev = norm
        if self.is_grid:
            self.boundary_contamination = max(
                self.boundary_contamination, self.psi.boundary_band_max()
            )
        else:
            self.leakage_max = max(self.leakage_max, self.psi.boundary_shell_probability())
        if self._step in self.snapshot_steps:
            self.snapshots[self._step] = self.psi.copy()

    def _advance_to(self, step: int):
        if step < self._step:
            raise EnsembleError("driver cannot evolve backwards")
        while self._step < step:
            self.psi = self.prop.propagate(self.psi, 1)
            self._step += 1
            self._observe()

    def view_at(self, t: float):
        step = int(round(t / self.dt))
        if abs(step * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise EnsembleError(f"view requested off the solver time grid: t={t}")
        if step not in self._views:
            self._advance_to(step)
            view = GridView(self.psi, self.model) if self.is_grid else FockView(self.psi, self.model)
            self._views[step] = view
            for s in [s for s in self._views if s < step - 1]:
                del self._views[s]
        return self._views[step]


# ---------------------------------------------------------------------------
# Full ensemble runs


@dataclass
class CheckpointStats:
    time: float
    distance: float | None
    noise_floor: float | None
    floor_mean: float | None
    floor_std: float | None
    meta: dict
    branch_overlap_max: float | None = None
    branch_weights: list | None = None
    branch_counts: list | None = None


@dataclass
class EnsembleResult:
    scenario: Scenario
    batch: TrajectoryBatch
    checkpoint_indices: list[int]
    checkpoint_stats: list[CheckpointStats]
    checkpoint_densities: list
    flags: dict
    final_state: object = None
    report: dict = field(default_factory=dict)

    @property
    def certification(self) -> str:
        return self.report.get("certification", "unknown")


def _initial_points(scenario: Scenario, wavefunction, rng) -> tuple[np.ndarray, float | None]:
    ens = scenario.ensemble
    D = scenario.beable_dimension
    if ens.initial_distribution == "point":
        pt = np.asarray(ens.point, dtype=float)
        if pt.shape != (D,):
            raise EnsembleError(f"point must have {D} coordinates")
        return np.tile(pt, (ens.samples, 1)), None
    if ens.initial_distribution == "density":
        if not isinstance(scenario.domain, GridDomain):
            raise EnsembleError("explicit density sampling requires a grid domain")
        from .expressions import compile_expression

        grids = [ax.grid() for ax in scenario.domain.axes]
        names = scenario.axis_names()
        mesh = np.meshgrid(*grids, indexing="ij") if D > 1 else [grids[0]]
        fn = compile_expression(scenario.ensemble.density, names)
        rho = np.broadcast_to(fn(**dict(zip(names, mesh))), mesh[0].shape)
        return GridDensity(grids, rho).sample(ens.samples, rng), None
    model = density_model_for(wavefunction)
    pts = model.sample(ens.samples, rng)
    rhat = model.last_rhat if isinstance(model, FockDensity) else None
    return pts, rhat


def run_ensemble(scenario: Scenario, check: bool = True) -> EnsembleResult:
    """Evolve the scenario, transport its ensemble, and assemble the report."""
    if check:
        diags = validate_scenario(scenario)
        if diags:
            raise ScenarioInvalid(diags)

    stride = scenario.trajectory_stride
    n_solver = int(round(scenario.t_final / scenario.dt))
    if abs(n_solver * scenario.dt - scenario.t_final) > 1e-9 * max(1.0, scenario.t_final):
        raise EnsembleError("t_final must be a multiple of dt")
    if n_solver % stride != 0:
        raise EnsembleError("t_final/dt must be a multiple of trajectory_stride")
    n_traj = n_solver // stride
    h = stride * scenario.dt

    seed_root = np.random.SeedSequence(scenario.ensemble.seed)
    ss_init, ss_boot = seed_root.spawn(2)

    driver = _StreamingDriver(scenario)
    x0, rhat = _initial_points(scenario, driver.psi, _rng(ss_init))

    n_ckpt = max(2, scenario.ensemble.checkpoints)
    ckpt_idx = sorted(set(int(round(i)) for i in np.linspace(0, n_traj, n_ckpt)))
    driver.snapshot_steps = {i * stride for i in ckpt_idx}
    driver.snapshots[0] = driver.psi.copy()

    energy0 = driver.energy()
    batch = integrate_trajectories(
        x0, driver.view_at, t_final=scenario.t_final, dt=h,
        model=scenario.model, policy=scenario.node_policy,
    )
    energy1 = driver.energy()

    boot_rngs = {i: _rng(ss) for i, ss in zip(ckpt_idx, ss_boot.spawn(len(ckpt_idx)))}
    stats: list[CheckpointStats] = []
    densities = []
    branch_snapshots: dict[int, BranchDecomposition] = {}
    state_snapshots: dict[int, object] = {}
    for i in ckpt_idx:
        psi_t = driver.snapshots[i * stride]
        state_snapshots[i] = psi_t
        dens = density_model_for(psi_t)
        densities.append(dens)
        positions = batch.positions[i]
        if batch.size >= MIN_ENSEMBLE_FOR_DISTANCE:
            dist, meta = equivariance_distance(positions, dens)
            floor = bootstrap_noise_floor(dens, batch.size, boot_rngs[i])
        else:
            dist, meta = None, {"skipped": "insufficient_samples"}
            floor = {"floor": None, "mean": None, "std": None}
        entry = CheckpointStats(
            time=float(batch.times[i]), distance=dist, noise_floor=floor["floor"],
            floor_mean=floor["mean"], floor_std=floor["std"], meta=meta,
        )
        if scenario.branches is not None:
            dec = build_branches(psi_t, scenario.branches, scenario.model)
            branch_snapshots[i] = dec
            overlap = dec.overlap_matrix()
            off = overlap[~np.eye(dec.size, dtype=bool)]
            entry.branch_overlap_max = float(off.max()) if off.size else 0.0
            entry.branch_weights = [float(w) for w in dec.weights()]
            member = dec.membership(positions)
            entry.branch_counts = [int(np.sum(member == k)) for k in range(dec.size)]
        stats.append(entry)

    collapse = _collapse_analysis(scenario, batch, stats, branch_snapshots, state_snapshots, ckpt_idx)

    flags = {
        "node_events": batch.node_event_count,
        "node_dwell_violations": int(np.sum(batch.dwell_violations)),
        "domain_exits": int(np.sum(batch.exited)),
        "boundary_contamination": driver.boundary_contamination,
        "fock_leakage": driver.leakage_max,
        "mcmc_rhat": rhat,
    }
    diagnostics = []
    if flags["node_events"]:
        diagnostics.append("NODE_EVENTS")
    if flags["node_dwell_violations"]:
        diagnostics.append("NODE_DWELL")
    if flags["domain_exits"]:
        diagnostics.append("DOMAIN_EXITS")
    if driver.is_grid and flags["boundary_contamination"] > BOUNDARY_CONTAMINATION_LIMIT:
        diagnostics.append("BOUNDARY_CONTAMINATION")
    if not driver.is_grid and flags["fock_leakage"] > LEAKAGE_LIMIT:
        diagnostics.append("FOCK_LEAKAGE")
    if rhat is not None and rhat > RHAT_THRESHOLD:
        diagnostics.append("MCMC_RHAT")

    report = {
        "scenario": scenario.name,
        "seed": scenario.ensemble.seed,
        "samples": scenario.ensemble.samples,
        "t_final": scenario.t_final,
        "dt": scenario.dt,
        "trajectory_dt": h,
        "norm_drift_max_per_step": driver.norm_drift_max,
        "energy_initial": energy0,
        "energy_final": energy1,
        "energy_rel_drift": abs(energy1 - energy0) / max(abs(energy0), 1e-30),
        "checkpoints": [
            {
                "t": s.time,
                "distance": s.distance,
                "noise_floor": s.noise_floor,
                "floor_mean": s.floor_mean,
                "floor_std": s.floor_std,
                "binning": s.meta,
                "branch_overlap_max": s.branch_overlap_max,
                "branch_weights": s.branch_weights,
                "branch_counts": s.branch_counts,
            }
            for s in stats
        ],
        "branches": collapse,
        "flags": {k: (float(v) if isinstance(v, (int, float, np.floating)) and v is not None else v)
                  for k, v in flags.items()},
        "diagnostics": diagnostics,
        "certification": "diagnostics" if diagnostics else "certified",
    }
    return EnsembleResult(
        scenario=scenario,
        batch=batch,
        checkpoint_indices=ckpt_idx,
        checkpoint_stats=stats,
        checkpoint_densities=densities,
        flags=flags,
        final_state=driver.psi,
        report=report,
    )


def _collapse_analysis(scenario, batch, stats, branch_snapshots, state_snapshots, ckpt_idx) -> dict | None:
    """Branch stability and single-branch velocity agreement after collapse."""
    if scenario.branches is None or not branch_snapshots:
        return None
    from .guidance import make_view

    threshold = scenario.branches.overlap_threshold
    collapsed = [
        (pos, i) for pos, i in enumerate(ckpt_idx)
        if stats[pos].branch_overlap_max is not None and stats[pos].branch_overlap_max < threshold
    ]
    out = {
        "declared": True,
        "overlap_threshold": threshold,
        "first_collapsed_checkpoint": None,
        "membership_stable_fraction": None,
        "velocity_consistency_max_rel": None,
        "final_weights": stats[-1].branch_weights,
        "final_counts": stats[-1].branch_counts,
    }
    if not collapsed:
        return out
    first_pos, first_idx = collapsed[0]
    out["first_collapsed_checkpoint"] = stats[first_pos].time
    initial = branch_snapshots[first_idx].membership(batch.positions[first_idx])
    stable = np.ones(batch.size, dtype=bool)
    for pos, idx in collapsed[1:]:
        member = branch_snapshots[idx].membership(batch.positions[idx])
        stable &= member == initial
    out["membership_stable_fraction"] = float(np.mean(stable))

    _, last_idx = collapsed[-1]
    dec = branch_snapshots[last_idx]
    pts = batch.positions[last_idx]
    take = min(256, batch.size)
    sel = np.linspace(0, batch.size - 1, take).astype(int)
    view = make_view(state_snapshots[last_idx], scenario.model)
    v_full, _ = velocity_and_density(view, pts[sel], scenario.model)
    member = dec.membership(pts[sel])
    v_branch = np.empty_like(v_full)
    for k in range(dec.size):
        rows = member == k
        if np.any(rows):
            v_branch[rows] = dec.branch_velocity(k, pts[sel][rows])
    scale = np.maximum(np.linalg.norm(v_full, axis=1), 1e-30)
    rel = np.linalg.norm(v_full - v_branch, axis=1) / scale
    out["velocity_consistency_max_rel"] = float(np.max(rel))
    return out
