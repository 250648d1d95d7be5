"""Grid-based unitary evolution for particle, Pauli, and field-mode models.

Wavefunctions live on periodic tensor-product grids (right endpoint
excluded) with a trailing internal index (1 for scalars, 2 for Pauli
spinors, F for fermionic labels).  Kinetic terms are applied spectrally.

Time stepping:

* split-step (Strang) for Hamiltonians that are kinetic + position-diagonal
  with no internal coupling (internal_dim == 1),
* Crank-Nicolson for internal-index coupling (Pauli, field_mode with
  F > 1) and on request; the Cayley form shares eigenvectors with the
  discrete Hamiltonian, so discrete eigenstates stay exactly stationary.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, eigsh, gmres

from .expressions import compile_expression
from .model import (
    FieldModeHamiltonian,
    GridAxis,
    HamiltonianSpec,
    ParticleHamiltonian,
    PauliHamiltonian,
)

# Crank-Nicolson uses a dense LU of (I + i dt H / 2hbar) up to this many
# unknowns; beyond that it falls back to matrix-free GMRES.
DENSE_SOLVE_LIMIT = 2500
GMRES_RTOL = 1e-12

_PAULI = (
    np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
)


class SolverError(ValueError):
    """Structural problem: incompatible shapes or unsupported Hamiltonian."""


class StabilityError(RuntimeError):
    """Time step too large for the chosen scheme to be meaningful."""


@dataclass
class WavefunctionGrid:
    """Complex amplitudes over a tensor grid x internal index."""

    axes: tuple[GridAxis, ...]
    amplitudes: np.ndarray  # shape (*points, internal_dim)
    time: float = 0.0

    def __post_init__(self):
        expected = tuple(ax.points for ax in self.axes)
        if self.amplitudes.shape[:-1] != expected:
            raise SolverError(
                f"amplitude shape {self.amplitudes.shape} does not match grid {expected}"
            )

    @property
    def internal_dim(self) -> int:
        return self.amplitudes.shape[-1]

    @property
    def dimension(self) -> int:
        return len(self.axes)

    def grids(self) -> list[np.ndarray]:
        return [ax.grid() for ax in self.axes]

    def meshes(self) -> list[np.ndarray]:
        g = self.grids()
        return list(np.meshgrid(*g, indexing="ij")) if len(g) > 1 else g

    @property
    def cell_volume(self) -> float:
        return float(np.prod([ax.step for ax in self.axes]))

    def density(self) -> np.ndarray:
        return np.sum(np.abs(self.amplitudes) ** 2, axis=-1)

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.cell_volume)

    def normalize(self) -> None:
        self.amplitudes /= np.sqrt(self.norm_sq())

    def copy(self) -> "WavefunctionGrid":
        return WavefunctionGrid(self.axes, self.amplitudes.copy(), self.time)

    def boundary_band_max(self, fraction: float = 0.05) -> float:
        """Largest |psi| within ``fraction`` of any boundary, relative to max."""
        amax = float(np.max(np.abs(self.amplitudes)))
        if amax == 0.0:
            return 0.0
        worst = 0.0
        for d, ax in enumerate(self.axes):
            band = max(1, int(fraction * ax.points))
            sl = [slice(None)] * self.amplitudes.ndim
            for edge in (slice(0, band), slice(-band, None)):
                sl[d] = edge
                worst = max(worst, float(np.max(np.abs(self.amplitudes[tuple(sl)]))))
        return worst / amax


def _wavenumbers(axes: tuple[GridAxis, ...]) -> list[np.ndarray]:
    return [2 * np.pi * scipy.fft.fftfreq(ax.points, d=ax.step) for ax in axes]


def _mesh_k(axes) -> list[np.ndarray]:
    ks = _wavenumbers(axes)
    return list(np.meshgrid(*ks, indexing="ij")) if len(ks) > 1 else ks


def spectral_gradient(arr: np.ndarray, axes: tuple[GridAxis, ...]) -> list[np.ndarray]:
    """Per-axis spectral derivative; trailing (non-grid) axes pass through."""
    D = len(axes)
    spatial = tuple(range(D))
    ft = scipy.fft.fftn(arr, axes=spatial)
    out = []
    for d, k in enumerate(_mesh_k(axes)):
        shape = k.shape + (1,) * (arr.ndim - D)
        out.append(scipy.fft.ifftn(1j * k.reshape(shape) * ft, axes=spatial))
    return out


class GridHamiltonian:
    """Hamiltonian application routine on a fixed grid.

    ``kinetic_k`` is the kinetic symbol on the Fourier grid (scalar field),
    ``diagonal`` the position-diagonal part: shape (*points,) for
    internal_dim 1, else (*points, F, F).  Pauli A-terms are applied via
    spectral gradients.
    """

    def __init__(self, spec: HamiltonianSpec, axes: tuple[GridAxis, ...]):
        if len(axes) > 3:
            raise SolverError("grid solvers support at most 3 coordinates")
        self.spec = spec
        self.axes = axes
        self.hbar = getattr(spec, "hbar", 1.0)
        self.internal_dim = spec.internal_dim
        self.shape = tuple(ax.points for ax in axes) + (self.internal_dim,)
        grids = [ax.grid() for ax in axes]
        mesh = np.meshgrid(*grids, indexing="ij") if len(grids) > 1 else [grids[0]]
        kmesh = _mesh_k(axes)
        self._a_field = None
        self._div_a = None

        if isinstance(spec, ParticleHamiltonian):
            if len(spec.masses) != len(axes):
                raise SolverError("one mass per coordinate required")
            self.kinetic_k = sum(
                self.hbar**2 * kmesh[d] ** 2 / (2 * spec.masses[d]) for d in range(len(axes))
            )
            self.diagonal = self._scalar_field(spec.potential, grids, mesh)
        elif isinstance(spec, PauliHamiltonian):
            if self.internal_dim != 2:
                raise SolverError("Pauli Hamiltonian needs a 2-component spinor")
            self.kinetic_k = sum(self.hbar**2 * k**2 / (2 * spec.mass) for k in kmesh)
            B = [self._scalar_field(s, grids, mesh) for s in spec.magnetic_field]
            V = self._scalar_field(spec.potential, grids, mesh)
            diag = np.zeros(mesh[0].shape + (2, 2), dtype=complex)
            for i in range(3):
                diag += spec.magnetic_moment * B[i][..., None, None] * _PAULI[i]
            diag += V[..., None, None] * np.eye(2)
            self.diagonal = diag
            A = np.stack([self._scalar_field(s, grids, mesh) for s in spec.vector_potential])
            if np.any(A != 0.0):
                self._a_field = A  # (3 or D, *points)
                # np.gradient avoids spectral ringing for non-periodic A
                div = np.zeros(mesh[0].shape)
                for d in range(len(axes)):
                    div += np.gradient(A[d], grids[d], axis=d, edge_order=2)
                self._div_a = div
        elif isinstance(spec, FieldModeHamiltonian):
            if spec.mode_count != len(axes):
                raise SolverError("one grid coordinate per field mode required")
            self.kinetic_k = sum(0.5 * k**2 for k in kmesh)
            F = spec.fermion_dim
            quad = np.zeros(mesh[0].shape)
            for j, w in enumerate(spec.frequencies):
                quad += 0.5 * w**2 * mesh[j] ** 2
            if F == 1:
                g = spec.coupling_matrices()[:, 0, 0].real
                const = spec.fermion_matrix()[0, 0].real
                diag1 = quad + const
                for j in range(spec.mode_count):
                    diag1 = diag1 + g[j] * mesh[j]
                self.diagonal = diag1
            else:
                diag = quad[..., None, None] * np.eye(F) + spec.fermion_matrix()
                gs = spec.coupling_matrices()
                for j in range(spec.mode_count):
                    diag = diag + mesh[j][..., None, None] * gs[j]
                self.diagonal = diag
        else:
            raise SolverError(f"unsupported Hamiltonian kind {getattr(spec, 'kind', spec)!r}")

        if self.internal_dim == 1 and self.diagonal.ndim != len(axes):
            raise SolverError("internal bookkeeping error: scalar diagonal expected")

    def _scalar_field(self, source: str, grids, mesh) -> np.ndarray:
        names = tuple(ax.name for ax in self.axes)
        fn = compile_expression(source, names)
        out = fn(**{n: m for n, m in zip(names, mesh)})
        return np.broadcast_to(out, mesh[0].shape).astype(float)

    # -- application ------------------------------------------------------

    def apply(self, amplitudes: np.ndarray) -> np.ndarray:
        """H acting on (*points, F [, batch]) amplitudes."""
        if amplitudes.shape[: len(self.shape) - 1] != self.shape[:-1] or amplitudes.shape[
            len(self.axes)
        ] != self.internal_dim:
            raise SolverError(f"amplitudes of shape {self.shape} (+ optional batch) expected")
        D = len(self.axes)
        spatial = tuple(range(D))
        extra = amplitudes.ndim - D - 1  # 0 or 1 trailing batch axis
        kshape = self.kinetic_k.shape + (1,) * (1 + extra)

        ft = scipy.fft.fftn(amplitudes, axes=spatial)
        out = scipy.fft.ifftn(self.kinetic_k.reshape(kshape) * ft, axes=spatial)

        if self.internal_dim == 1:
            out = out + self.diagonal.reshape(kshape) * amplitudes
        else:
            sub = "...fg,...gb->...fb" if extra else "...fg,...g->...f"
            out = out + np.einsum(sub, self.diagonal, amplitudes)

        if self._a_field is not None:
            spec = self.spec
            coef = spec.charge / (spec.mass * spec.light_speed)
            ksym = _mesh_k(self.axes)
            for d in range(D):
                grad = scipy.fft.ifftn(1j * ksym[d].reshape(kshape) * ft, axes=spatial)
                out = out + 1j * self.hbar * coef * self._a_field[d].reshape(kshape) * grad
            out = out + 0.5j * self.hbar * coef * self._div_a.reshape(kshape) * amplitudes
            a2 = np.sum(self._a_field**2, axis=0)
            out = out + (spec.charge**2 * a2 / (2 * spec.mass * spec.light_speed**2)).reshape(
                kshape
            ) * amplitudes
        return out

    def expectation(self, psi: WavefunctionGrid) -> float:
        h_psi = self.apply(psi.amplitudes)
        return float(np.real(np.sum(np.conj(psi.amplitudes) * h_psi)) * psi.cell_volume)

    @property
    def n_unknowns(self) -> int:
        return int(np.prod(self.shape))

    def to_linear_operator(self) -> LinearOperator:
        shape = self.shape

        def mv(vec):
            return self.apply(vec.reshape(shape)).ravel()

        n = self.n_unknowns
        return LinearOperator((n, n), matvec=mv, dtype=complex)

    def hermiticity_defect(self, seed: int = 0, trials: int = 5) -> float:
        """max |<phi, H psi> - <H phi, psi>| over random normalized states."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            phi = rng.standard_normal(self.shape) + 1j * rng.standard_normal(self.shape)
            psi = rng.standard_normal(self.shape) + 1j * rng.standard_normal(self.shape)
            phi /= np.linalg.norm(phi)
            psi /= np.linalg.norm(psi)
            lhs = np.vdot(phi, self.apply(psi))
            rhs = np.vdot(self.apply(phi), psi)
            worst = max(worst, abs(lhs - rhs))
        return worst

    def lowest_eigenvalue(self) -> float:
        val = eigsh(self.to_linear_operator(), k=1, which="SA", return_eigenvectors=False)
        return float(val[0])


def assemble_hamiltonian(spec: HamiltonianSpec, axes) -> GridHamiltonian:
    """Build the HPsi application routine for a Hamiltonian on a grid."""
    return GridHamiltonian(spec, tuple(axes))


# ---------------------------------------------------------------------------
# Propagators


class SplitStepPropagator:
    """Strang splitting for scalar kinetic + position-diagonal Hamiltonians."""

    def __init__(self, ham: GridHamiltonian, dt: float):
        if ham.internal_dim != 1:
            raise SolverError("split-step propagator requires internal_dim == 1")
        self.ham = ham
        self.dt = dt
        self._check_scale()
        hbar = ham.hbar
        self._half_v = np.exp(-0.5j * dt * ham.diagonal / hbar)[..., None]
        self._full_t = np.exp(-1j * dt * ham.kinetic_k / hbar)[..., None]
        self._spatial = tuple(range(len(ham.axes)))

    def _check_scale(self):
        scale = float(np.max(np.abs(self.ham.diagonal))) + float(np.max(self.ham.kinetic_k))
        if self.dt * scale / self.ham.hbar > 200.0:
            raise StabilityError(
                f"dt*|H|/hbar ~ {self.dt * scale / self.ham.hbar:.1f} is too large to be meaningful"
            )

    def step(self, amplitudes: np.ndarray) -> np.ndarray:
        out = self._half_v * amplitudes
        out = scipy.fft.fftn(out, axes=self._spatial)
        out *= self._full_t
        out = scipy.fft.ifftn(out, axes=self._spatial)
        out *= self._half_v
        return out


class CrankNicolsonPropagator:
    """Cayley-form stepper: (1 + i dt H / 2hbar) psi' = (1 - i dt H / 2hbar) psi.

    Uses a one-time dense LU when the unknown count is small enough,
    otherwise matrix-free GMRES warm-started from the previous state.
    """

    def __init__(self, ham: GridHamiltonian, dt: float):
        self.ham = ham
        self.dt = dt
        self.gamma = dt / (2 * ham.hbar)
        n = ham.n_unknowns
        self._dense = n <= DENSE_SOLVE_LIMIT
        if self._dense:
            a = self._dense_forward_matrix()
            self._lu = lu_factor(a)
        else:
            self._op = None

    def _dense_forward_matrix(self) -> np.ndarray:
        n = self.ham.n_unknowns
        a = np.zeros((n, n), dtype=complex)
        block = 256
        eye = np.eye(n, dtype=complex)
        for start in range(0, n, block):
            cols = eye[:, start : start + block].reshape(self.ham.shape + (-1,))
            a[:, start : start + block] = self.ham.apply(cols).reshape(n, -1)
        a *= 1j * self.gamma
        a[np.diag_indices(n)] += 1.0
        return a

    def step(self, amplitudes: np.ndarray) -> np.ndarray:
        h_amp = self.ham.apply(amplitudes)
        rhs = amplitudes - 1j * self.gamma * h_amp
        if self._dense:
            sol = lu_solve(self._lu, rhs.ravel())
            return sol.reshape(self.ham.shape)
        if self._op is None:
            n = self.ham.n_unknowns

            def mv(vec):
                arr = vec.reshape(self.ham.shape)
                return (arr + 1j * self.gamma * self.ham.apply(arr)).ravel()

            self._op = LinearOperator((n, n), matvec=mv, dtype=complex)
        sol, info = gmres(self._op, rhs.ravel(), x0=rhs.ravel(), rtol=GMRES_RTOL, atol=0.0, restart=60, maxiter=300)
        if info != 0:
            raise StabilityError(f"Crank-Nicolson GMRES did not converge (info={info}); reduce dt")
        return sol.reshape(self.ham.shape)


class GridPropagator:
    """Scheme router plus step bookkeeping for one (spec, axes, dt) triple."""

    def __init__(self, spec: HamiltonianSpec, axes, dt: float, scheme: str = "auto"):
        self.ham = assemble_hamiltonian(spec, axes)
        self.dt = dt
        if scheme == "auto":
            scheme = "split_step" if self.ham.internal_dim == 1 else "crank_nicolson"
        if scheme == "split_step":
            self._engine = SplitStepPropagator(self.ham, dt)
        elif scheme == "crank_nicolson":
            self._engine = CrankNicolsonPropagator(self.ham, dt)
        else:
            raise SolverError(f"unknown scheme {scheme!r}")
        self.scheme = scheme

    def step_array(self, amplitudes: np.ndarray) -> np.ndarray:
        return self._engine.step(amplitudes)

    def propagate(self, psi: WavefunctionGrid, steps: int = 1) -> WavefunctionGrid:
        if psi.amplitudes.shape != self.ham.shape:
            raise SolverError(
                f"state shape {psi.amplitudes.shape} does not match Hamiltonian {self.ham.shape}"
            )
        amps = psi.amplitudes
        for _ in range(steps):
            amps = self._engine.step(amps)
        return WavefunctionGrid(psi.axes, amps, psi.time + steps * self.dt)


@lru_cache(maxsize=8)
def _cached_propagator(spec, axes, dt, scheme):
    return GridPropagator(spec, axes, dt, scheme)


def evolve(psi: WavefunctionGrid, spec: HamiltonianSpec, dt: float, steps: int = 1,
           scheme: str = "auto") -> WavefunctionGrid:
    """Advance a grid wavefunction by ``steps`` timesteps of size ``dt``."""
    prop = _cached_propagator(spec, tuple(psi.axes), dt, scheme)
    return prop.propagate(psi, steps)
