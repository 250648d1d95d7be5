"""Velocity fields and beable trajectory integration.

Velocities are ratios of probability current to probability density:

* particles:     v_k = (hbar/m_k) Im(psi* d_k psi) / |psi|^2
* Pauli spinors: v = j/rho with j = (hbar/m) sum_a Im(psi_a* grad psi_a)
                 - (e/m c) A rho
* field beables: v_j = sum_f Im(Psi_f* d_j Psi_f) / rho  (unit-mass quadratures)

Off-grid evaluation interpolates the wavefunction itself (tensor-product
cubic B-spline) and differentiates the interpolant; Fock states evaluate
exactly.  Node handling: where rho drops below floor * rho_max the speed is
capped and a node event is recorded; trajectories that leave the domain are
frozen with a diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

from .expressions import compile_expression
from .model import HamiltonianSpec, NodePolicy
from .solver_fock import FockWavefunction, evaluate_position
from .solver_grid import WavefunctionGrid


class GuidanceError(ValueError):
    pass


class DomainError(GuidanceError):
    """Requested point lies outside the wavefunction's evaluable domain."""


# ---------------------------------------------------------------------------
# Wavefunction views: uniform pointwise evaluation interface


class GridView:
    """Spline view of a grid wavefunction snapshot (immutable)."""

    def __init__(self, wf: WavefunctionGrid, model: HamiltonianSpec | None = None):
        self.time = wf.time
        self.model = model
        self.axes = wf.axes
        self.dimension = wf.dimension
        self.internal_dim = wf.internal_dim
        grids = wf.grids()
        self._lo = np.array([g[0] for g in grids])
        self._hi = np.array([g[-1] for g in grids])
        self.rho_max = float(np.max(wf.density()))
        c = wf.amplitudes
        knots = []
        for i, g in enumerate(grids):
            s = make_interp_spline(g, np.moveaxis(c, i, 0), k=3, axis=0)
            knots.append(s.t)
            c = np.moveaxis(s.c, 0, i)
        self._spline = NdBSpline(tuple(knots), c, k=3)
        self._a_funcs = None
        if model is not None and getattr(model, "kind", "") == "pauli":
            if any(src.strip() != "0" for src in model.vector_potential):
                names = tuple(ax.name for ax in wf.axes)
                self._a_funcs = [compile_expression(src, names) for src in model.vector_potential]

    def in_domain(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self._lo) & (points <= self._hi), axis=-1)

    def values(self, points: np.ndarray) -> np.ndarray:
        return self._spline(points)

    def values_and_grads(self, points: np.ndarray):
        vals = self._spline(points)
        grads = np.empty(vals.shape + (self.dimension,), dtype=complex)
        for d in range(self.dimension):
            nu = tuple(1 if i == d else 0 for i in range(self.dimension))
            grads[..., d] = self._spline(points, nu=nu)
        return vals, grads

    def vector_potential_at(self, points: np.ndarray) -> np.ndarray | None:
        """A(x) components along the grid coordinates, or None when A = 0."""
        if self._a_funcs is None:
            return None
        names = [ax.name for ax in self.axes]
        coords = {n: points[:, i] for i, n in enumerate(names)}
        a = np.zeros((points.shape[0], self.dimension))
        for d in range(self.dimension):
            a[:, d] = np.broadcast_to(self._a_funcs[d](**coords), points.shape[0])
        return a


class FockView:
    """Exact pointwise view of a Fock wavefunction snapshot."""

    def __init__(self, wf: FockWavefunction, model: HamiltonianSpec | None = None):
        self.wf = wf
        self.time = wf.time
        self.model = model
        self.dimension = wf.mode_count
        self.internal_dim = wf.fermion_dim
        self._lim = wf.reliable_ranges()
        self.rho_max = None  # maintained as a running maximum by callers

    def in_domain(self, points: np.ndarray) -> np.ndarray:
        return np.all(np.abs(points) <= self._lim, axis=-1)

    def values(self, points: np.ndarray) -> np.ndarray:
        from .solver_fock import position_values

        return position_values(self.wf, points)

    def values_and_grads(self, points: np.ndarray):
        return evaluate_position(self.wf, np.atleast_2d(points))

    def vector_potential_at(self, points):
        return None


def make_view(wavefunction, model: HamiltonianSpec | None = None):
    if isinstance(wavefunction, (GridView, FockView)):
        return wavefunction
    if isinstance(wavefunction, WavefunctionGrid):
        return GridView(wavefunction, model)
    if isinstance(wavefunction, FockWavefunction):
        return FockView(wavefunction, model)
    raise GuidanceError(f"cannot build a view of {type(wavefunction).__name__}")


# ---------------------------------------------------------------------------
# Densities and velocities


def _coordinate_mass_factors(model: HamiltonianSpec | None, dim: int) -> np.ndarray:
    """hbar/m_d prefactor per coordinate."""
    if model is None or model.kind == "field_mode":
        return np.ones(dim)
    if model.kind == "particle_schrodinger":
        return model.hbar / np.asarray(model.masses, dtype=float)
    if model.kind == "pauli":
        return np.full(dim, model.hbar / model.mass)
    raise GuidanceError(f"unknown model kind {model.kind!r}")


def density(wavefunction, x, model: HamiltonianSpec | None = None) -> np.ndarray:
    """Position density summed over the internal index."""
    view = make_view(wavefunction, model)
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    inside = view.in_domain(pts)
    if not np.all(inside):
        raise DomainError(f"{np.count_nonzero(~inside)} point(s) outside the evaluable domain")
    vals = view.values(pts)
    rho = np.sum(np.abs(vals) ** 2, axis=-1)
    return rho if np.ndim(x) > 1 else float(rho[0])


def velocity_and_density(view, points: np.ndarray, model: HamiltonianSpec | None = None):
    """Guidance velocity and density at points; no node policy applied."""
    model = model if model is not None else view.model
    vals, grads = view.values_and_grads(points)
    rho = np.sum(np.abs(vals) ** 2, axis=-1)
    current = np.einsum("bf,bfd->bd", np.conj(vals), grads).imag
    current *= _coordinate_mass_factors(model, view.dimension)
    if model is not None and model.kind == "pauli":
        a = view.vector_potential_at(points)
        if a is not None:
            current -= (model.charge / (model.mass * model.light_speed)) * a * rho[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(rho[:, None] > 0.0, current / rho[:, None], 0.0)
    return v, rho


def _velocity_op(wavefunction, x, model, expected_kind: str | None) -> np.ndarray:
    view = make_view(wavefunction, model)
    model = model if model is not None else view.model
    if expected_kind and model is not None and model.kind != expected_kind:
        raise GuidanceError(f"expected a {expected_kind} model, got {model.kind}")
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    inside = view.in_domain(pts)
    if not np.all(inside):
        raise DomainError("point outside the evaluable domain")
    v, _ = velocity_and_density(view, pts, model)
    return v if np.ndim(x) > 1 else v[0]


def velocity_particles(wavefunction, x, model=None) -> np.ndarray:
    return _velocity_op(wavefunction, x, model, "particle_schrodinger")


def velocity_pauli(wavefunction, x, model=None) -> np.ndarray:
    return _velocity_op(wavefunction, x, model, "pauli")


def velocity_field_beables(wavefunction, x, model=None) -> np.ndarray:
    return _velocity_op(wavefunction, x, model, None)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class Trajectory:
    times: np.ndarray                 # (T,)
    points: np.ndarray                # (T, D)
    node_events: list = field(default_factory=list)  # (time, density) pairs
    exited: bool = False
    exit_time: float | None = None


@dataclass
class TrajectoryBatch:
    """Ensemble of trajectories on a shared time grid."""

    times: np.ndarray        # (T,)
    positions: np.ndarray    # (T, B, D)
    node_flags: np.ndarray   # (T, B); step ending at times[i] hit the node policy
    node_events: list        # (time, traj index, density) triples
    exited: np.ndarray       # (B,)
    exit_steps: np.ndarray   # (B,) step index of domain exit, -1 if none
    dwell_violations: np.ndarray  # (B,) persistent node dwelling flags

    @property
    def size(self) -> int:
        return self.positions.shape[1]

    @property
    def node_event_count(self) -> int:
        return len(self.node_events)

    def trajectory(self, b: int) -> Trajectory:
        events = [(t, rho) for (t, idx, rho) in self.node_events if idx == b]
        exit_t = None if self.exit_steps[b] < 0 else float(self.times[self.exit_steps[b]])
        return Trajectory(
            times=self.times.copy(),
            points=self.positions[:, b, :].copy(),
            node_events=events,
            exited=bool(self.exited[b]),
            exit_time=exit_t,
        )


class _NodeState:
    """Running density reference and per-trajectory dwell counters."""

    def __init__(self, policy: NodePolicy, n_traj: int):
        self.policy = policy
        self.rho_ref = 0.0
        self.dwell = np.zeros(n_traj, dtype=int)
        self.cap = policy.velocity_cap  # may stay None until calibrated

    def calibrate_cap(self, speeds: np.ndarray, span: float, duration: float) -> None:
        if self.cap is not None:
            return
        finite = speeds[np.isfinite(speeds)]
        typical = float(np.percentile(finite, 95)) if finite.size else 0.0
        fallback = span / max(duration, 1e-30)
        self.cap = 10.0 * max(typical, fallback, 1e-12)


def _stage_velocity(view, model, x, active, state: _NodeState):
    """Velocity for active rows with the node policy applied.

    The speed cap applies wherever |v| exceeds it (guidance velocities are
    singular at nodes, and huge steps must never pass silently); an event
    is flagged when the cap bites or the density is below the floor.
    """
    B, D = x.shape
    v = np.zeros((B, D))
    flagged = np.zeros(B, dtype=bool)
    rho_full = np.zeros(B)
    if not np.any(active):
        return v, flagged, rho_full
    idx = np.flatnonzero(active)
    vv, rho = velocity_and_density(view, x[idx], model)
    rho_ref = view.rho_max if view.rho_max is not None else 0.0
    state.rho_ref = max(state.rho_ref, rho_ref, float(rho.max(initial=0.0)))
    floor = state.policy.density_floor * state.rho_ref
    at_node = rho < floor
    speed = np.linalg.norm(vv, axis=1)
    too_fast = speed > state.cap
    if np.any(too_fast):
        vv[too_fast] *= (state.cap / speed[too_fast])[:, None]
    v[idx] = vv
    flagged[idx] = at_node | too_fast
    rho_full[idx] = rho
    return v, flagged, rho_full


def integrate_trajectories(x0, view_at, t_final: float, dt: float,
                           model: HamiltonianSpec | None = None,
                           policy: NodePolicy | None = None,
                           t0: float = 0.0) -> TrajectoryBatch:
    """Fixed-step RK4 transport of an ensemble of beable configurations.

    ``view_at(t)`` must return a wavefunction view at time t; it is called
    at step endpoints and midpoints only, so drivers can hand out stored
    snapshots.  All trajectories advance in lockstep (vectorized).
    """
    policy = policy or NodePolicy()
    x = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    B, D = x.shape
    span = t_final - t0
    n_steps = int(round(span / dt))
    if n_steps < 0 or abs(n_steps * dt - span) > 1e-9 * max(1.0, abs(span)):
        raise GuidanceError(f"t_final - t0 = {span} is not a multiple of dt = {dt}")

    times = t0 + dt * np.arange(n_steps + 1)
    positions = np.empty((n_steps + 1, B, D))
    node_flags = np.zeros((n_steps + 1, B), dtype=bool)
    node_events: list = []
    exited = np.zeros(B, dtype=bool)
    exit_steps = np.full(B, -1, dtype=int)
    dwell_violations = np.zeros(B, dtype=bool)

    view0 = view_at(t0)
    inside = view0.in_domain(x)
    if not np.all(inside):
        raise DomainError(f"{np.count_nonzero(~inside)} initial point(s) outside the domain")
    positions[0] = x

    state = _NodeState(policy, B)
    if state.cap is None:
        v_probe, rho_probe = velocity_and_density(view0, x, model)
        state.rho_ref = max(
            view0.rho_max if view0.rho_max is not None else 0.0, float(rho_probe.max(initial=0.0))
        )
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        state.calibrate_cap(np.linalg.norm(v_probe, axis=1), float(np.max(hi - lo, initial=1.0)) + 1.0,
                            max(span, dt))

    active = ~exited
    for step in range(n_steps):
        t = times[step]
        va = view_at(t)
        vh = view_at(t + dt / 2)
        vb = view_at(t + dt)

        k1, c1, r1 = _stage_velocity(va, model, x, active, state)
        x2 = x + (dt / 2) * k1
        k2, c2, _ = _stage_velocity(vh, model, x2, active & vh.in_domain(x2), state)
        x3 = x + (dt / 2) * k2
        k3, c3, _ = _stage_velocity(vh, model, x3, active & vh.in_domain(x3), state)
        x4 = x + dt * k3
        k4, c4, _ = _stage_velocity(vb, model, x4, active & vb.in_domain(x4), state)

        x_new = x + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        clamped = (c1 | c2 | c3 | c4) & active

        leaving = active & ~vb.in_domain(x_new)
        if np.any(leaving):
            x_new[leaving] = x[leaving]
            exited[leaving] = True
            exit_steps[leaving] = step
            active = active & ~leaving

        x_new[~active & ~leaving] = x[~active & ~leaving]
        x = x_new
        positions[step + 1] = x
        node_flags[step + 1] = clamped
        for b in np.flatnonzero(clamped):
            node_events.append((float(t), int(b), float(r1[b])))
        state.dwell[clamped] += 1
        state.dwell[~clamped] = 0
        dwell_violations |= state.dwell > policy.max_node_dwell

    return TrajectoryBatch(
        times=times,
        positions=positions,
        node_flags=node_flags,
        node_events=node_events,
        exited=exited,
        exit_steps=exit_steps,
        dwell_violations=dwell_violations,
    )


def integrate_trajectory(q0, view_at, t_final: float, dt: float,
                         model: HamiltonianSpec | None = None,
                         policy: NodePolicy | None = None,
                         t0: float = 0.0) -> Trajectory:
    """Single-trajectory convenience wrapper around integrate_trajectories."""
    batch = integrate_trajectories(
        np.atleast_2d(np.asarray(q0, dtype=float)), view_at, t_final, dt, model, policy, t0
    )
    return batch.trajectory(0)
