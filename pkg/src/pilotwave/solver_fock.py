"""Truncated number-basis solver for field-mode Hamiltonians.

States are evolved in the Fock (Hermite) basis, where quadratic-plus-linear
Hamiltonians are sparse, and evaluated pointwise in the position basis for
guidance.  Mode j is a unit-mass oscillator of frequency omega_j, so its
position-basis orbitals are phi_n(q) = omega^{1/4} h_n(sqrt(omega) q) with
h_n the orthonormal Hermite functions.

Amplitude layout: shape (n_max_1 + 1, ..., n_max_M + 1, F); the C-order
flattening of this array (occupation tuples lexicographic, fermionic label
fastest) is the vector ordering used by the assembled sparse Hamiltonian
and by snapshot exports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm
from scipy.sparse.linalg import expm_multiply

from .model import FieldModeHamiltonian

DENSE_EXPM_LIMIT = 2500
LEAKAGE_THRESHOLD = 1e-6
_RANGE_PAD = 8.0  # in units of the dimensionless coordinate xi


class FockError(ValueError):
    """Structural problem with a Fock-space operation."""


class HermiteRangeError(ValueError):
    """Coordinate outside the reliable Hermite evaluation range for n_max."""


def hermite_functions(n_max: int, xi: np.ndarray) -> np.ndarray:
    """Orthonormal Hermite functions h_0..h_n_max at points xi, shape (n_max+1, ...).

    Upward recurrence on the normalized functions keeps every term O(1),
    so the evaluation is overflow-free far beyond n_max = 60.
    """
    xi = np.asarray(xi, dtype=float)
    out = np.empty((n_max + 1,) + xi.shape)
    out[0] = np.pi**-0.25 * np.exp(-(xi**2) / 2)
    if n_max >= 1:
        out[1] = np.sqrt(2.0) * xi * out[0]
    for n in range(1, n_max):
        out[n + 1] = np.sqrt(2.0 / (n + 1)) * xi * out[n] - np.sqrt(n / (n + 1)) * out[n - 1]
    return out


def hermite_functions_with_derivatives(n_max: int, xi: np.ndarray):
    """(h, dh/dxi) for n = 0..n_max via the ladder identity."""
    h = hermite_functions(n_max + 1, xi)
    dh = np.empty_like(h[: n_max + 1])
    for n in range(n_max + 1):
        dh[n] = -np.sqrt((n + 1) / 2.0) * h[n + 1]
        if n >= 1:
            dh[n] += np.sqrt(n / 2.0) * h[n - 1]
    return h[: n_max + 1], dh


@dataclass
class FockWavefunction:
    """Complex amplitudes over occupation tuples x fermionic label."""

    frequencies: tuple[float, ...]
    n_max: tuple[int, ...]
    amplitudes: np.ndarray  # shape (*(n_max + 1), F)
    time: float = 0.0

    def __post_init__(self):
        expected = tuple(n + 1 for n in self.n_max)
        if self.amplitudes.shape[:-1] != expected:
            raise FockError(
                f"amplitude shape {self.amplitudes.shape} does not match truncation {expected}"
            )
        if len(self.frequencies) != len(self.n_max):
            raise FockError("one frequency per mode required")
        self._eval_stack = None  # lazy cache: [psi, d psi/dq_j...] in padded basis

    @property
    def mode_count(self) -> int:
        return len(self.n_max)

    @property
    def fermion_dim(self) -> int:
        return self.amplitudes.shape[-1]

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def normalize(self) -> None:
        self.amplitudes /= np.sqrt(self.norm_sq())

    def copy(self) -> "FockWavefunction":
        return FockWavefunction(self.frequencies, self.n_max, self.amplitudes.copy(), self.time)

    def boundary_shell_probability(self) -> float:
        """Probability on the truncation boundary (some n_j == n_max_j)."""
        interior = self.amplitudes[tuple(slice(0, n) for n in self.n_max)]
        return self.norm_sq() - float(np.sum(np.abs(interior) ** 2))

    def reliable_ranges(self) -> np.ndarray:
        """Per-mode |q| limit of trustworthy position-basis evaluation."""
        lims = [
            (np.sqrt(2.0 * n + 1.0) + _RANGE_PAD) / np.sqrt(w)
            for n, w in zip(self.n_max, self.frequencies)
        ]
        return np.asarray(lims)

    def mode_grid(self, j: int, points: int = 257, pad: float = 5.0) -> np.ndarray:
        """Position grid covering mode j's classically allowed region."""
        w = self.frequencies[j]
        lim = (np.sqrt(2.0 * self.n_max[j] + 1.0) + pad) / np.sqrt(w)
        return np.linspace(-lim, lim, points)


# ---------------------------------------------------------------------------
# Hamiltonian assembly and evolution


def assemble_fock_hamiltonian(spec: FieldModeHamiltonian, n_max) -> sp.csr_matrix:
    """Sparse H over the flattened (occupations..., label) basis."""
    if spec.kind != "field_mode":
        raise FockError("Fock solver requires a field_mode Hamiltonian")
    n_max = tuple(int(n) for n in n_max)
    if len(n_max) != spec.mode_count:
        raise FockError("one truncation per mode required")
    F = spec.fermion_dim
    dims = [n + 1 for n in n_max]

    def mode_number(j):
        n = np.arange(dims[j])
        return sp.diags(spec.frequencies[j] * (n + 0.5))

    def mode_position(j):
        n = np.arange(1, dims[j])
        off = np.sqrt(n / (2.0 * spec.frequencies[j]))
        return sp.diags([off, off], [-1, 1])

    def embed(op, j):
        factors = [sp.identity(d) for d in dims] + [sp.identity(F)]
        factors[j] = op
        out = factors[0]
        for f in factors[1:]:
            out = sp.kron(out, f)
        return out

    total = sp.csr_matrix((int(np.prod(dims)) * F, int(np.prod(dims)) * F), dtype=complex)
    for j in range(spec.mode_count):
        total = total + embed(mode_number(j), j)
    const = spec.fermion_matrix()
    if np.any(const != 0):
        eye = sp.identity(int(np.prod(dims)))
        total = total + sp.kron(eye, sp.csr_matrix(const))
    couplings = spec.coupling_matrices()
    for j in range(spec.mode_count):
        if np.any(couplings[j] != 0):
            factors = [sp.identity(d) for d in dims] + [sp.csr_matrix(couplings[j])]
            factors[j] = mode_position(j)
            part = factors[0]
            for f in factors[1:]:
                part = sp.kron(part, f)
            total = total + part
    return total.tocsr()


class FockPropagator:
    """exp(-i H dt) application: diagonal phases, dense expm, or Krylov."""

    def __init__(self, spec: FieldModeHamiltonian, n_max, dt: float):
        self.spec = spec
        self.n_max = tuple(int(n) for n in n_max)
        self.dt = dt
        h = assemble_fock_hamiltonian(spec, n_max)
        self.dim = h.shape[0]
        offdiag = h - sp.diags(h.diagonal())
        if offdiag.nnz == 0:
            self._mode = "diagonal"
            self._phase = np.exp(-1j * dt * h.diagonal().real)
        elif self.dim <= DENSE_EXPM_LIMIT:
            self._mode = "dense"
            self._u = expm(-1j * dt * h.toarray())
        else:
            self._mode = "krylov"
            self._gen = (-1j * dt) * h.tocsc()

    def step_flat(self, vec: np.ndarray) -> np.ndarray:
        if self._mode == "diagonal":
            return self._phase * vec
        if self._mode == "dense":
            return self._u @ vec
        return expm_multiply(self._gen, vec)

    def propagate(self, psi: FockWavefunction, steps: int = 1) -> FockWavefunction:
        vec = psi.amplitudes.ravel()
        for _ in range(steps):
            vec = self.step_flat(vec)
        return FockWavefunction(
            psi.frequencies, psi.n_max, vec.reshape(psi.amplitudes.shape), psi.time + steps * self.dt
        )


def evolve_fock(psi: FockWavefunction, spec: FieldModeHamiltonian, dt: float,
                steps: int = 1, propagator: FockPropagator | None = None) -> FockWavefunction:
    """Advance a Fock wavefunction by ``steps`` timesteps of size ``dt``."""
    if spec.mode_count != psi.mode_count or spec.fermion_dim != psi.fermion_dim:
        raise FockError("Hamiltonian does not match the wavefunction's mode/label structure")
    if tuple(spec.frequencies) != tuple(psi.frequencies):
        raise FockError("Hamiltonian and wavefunction disagree on mode frequencies")
    prop = propagator or FockPropagator(spec, psi.n_max, dt)
    return prop.propagate(psi, steps)


# ---------------------------------------------------------------------------
# Position-basis evaluation


def _mode_matrices(psi: FockWavefunction, points: np.ndarray, extra_order: int = 0):
    """Per-mode (B, n+1+extra) Hermite-orbital value matrices at the points."""
    B, M = points.shape
    lims = psi.reliable_ranges()
    vals = []
    for j in range(M):
        q = points[:, j]
        if np.any(np.abs(q) > lims[j]):
            raise HermiteRangeError(
                f"coordinate {j} outside the reliable evaluation range |q| <= {lims[j]:.3g}"
            )
        w = psi.frequencies[j]
        h = hermite_functions(psi.n_max[j] + extra_order, np.sqrt(w) * q)
        vals.append(w**0.25 * h.T)
    return vals


def _contract(amplitudes: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    """Sum_n amp[n1..nM, f] * prod_j factors[j][b, n_j] -> (B, F).

    Peels one mode per step via (batched) matmul so BLAS does the work.
    """
    B = factors[0].shape[0]
    n0 = amplitudes.shape[0]
    out = factors[0].astype(complex) @ amplitudes.reshape(n0, -1)  # (B, rest)
    for phi in factors[1:]:
        nj = phi.shape[1]
        view = out.reshape(B, nj, -1)
        out = (phi[:, None, :].astype(complex) @ view).reshape(B, -1)
    return out  # trailing axis is F by construction


def _evaluation_stack(psi: FockWavefunction) -> np.ndarray:
    """[psi, d psi/dq_1, ..., d psi/dq_M] as number-basis coefficients.

    The derivative of a truncated state reaches one order above the
    truncation (d/dq = sqrt(w/2)(a - a^dagger)), so all stack entries are
    stored padded to n_max + 1 per mode; entry 0 is psi itself.
    """
    if psi._eval_stack is not None:
        return psi._eval_stack
    M = psi.mode_count
    padded = tuple(n + 2 for n in psi.n_max) + (psi.fermion_dim,)
    stack = np.zeros((M + 1,) + padded, dtype=complex)
    interior = tuple(slice(0, n + 1) for n in psi.n_max)
    stack[(0,) + interior] = psi.amplitudes
    base = stack[0]
    for j in range(M):
        w = psi.frequencies[j]
        c = np.moveaxis(base, j, 0)
        d = np.moveaxis(stack[j + 1], j, 0)
        m = np.arange(c.shape[0])  # padded orders 0..n_max+1
        up = np.sqrt(w * (m[:-1] + 1) / 2.0)    # coefficient of c_{m+1} in d_m
        down = np.sqrt(w * m[1:] / 2.0)         # coefficient of c_{m-1} in d_m
        shape = (-1,) + (1,) * (c.ndim - 1)
        d[:-1] += up.reshape(shape) * c[1:]
        d[1:] -= down.reshape(shape) * c[:-1]
    psi._eval_stack = np.ascontiguousarray(np.moveaxis(stack, 0, -1))  # (*(n+2), F, M+1)
    return psi._eval_stack


def evaluate_position(psi: FockWavefunction, points) -> tuple[np.ndarray, np.ndarray]:
    """Psi_f(q) and its gradient at each point.

    Returns ``(values, gradients)`` with shapes (B, F) and (B, F, M) for
    B points in M coordinates.  The value and all M derivative expansions
    share one batched contraction over the padded orbital matrices.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != psi.mode_count:
        raise FockError(f"points must have {psi.mode_count} coordinates")
    stack = _evaluation_stack(psi)  # (*(n+2), F, M+1)
    factors = _mode_matrices(psi, pts, extra_order=1)
    out = _contract(stack, factors)  # (B, F*(M+1))
    out = out.reshape(pts.shape[0], psi.fermion_dim, psi.mode_count + 1)
    return out[..., 0], out[..., 1:]


def position_values(psi: FockWavefunction, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = _mode_matrices(psi, pts)
    return _contract(psi.amplitudes, vals)


def position_density(psi: FockWavefunction, points) -> np.ndarray:
    values = position_values(psi, points)
    return np.sum(np.abs(values) ** 2, axis=-1)


def tensor_grid_values(psi: FockWavefunction, axis_grids: list[np.ndarray]) -> np.ndarray:
    """Psi_f evaluated on a tensor-product grid, shape (G1, ..., GM, F).

    Contractions run mode by mode, so the cost is linear in the number of
    modes rather than in the full grid size times basis size.
    """
    if len(axis_grids) != psi.mode_count:
        raise FockError("one grid per mode required")
    out = psi.amplitudes
    for j, grid in enumerate(axis_grids):
        w = psi.frequencies[j]
        phi = w**0.25 * hermite_functions(psi.n_max[j], np.sqrt(w) * np.asarray(grid))
        # contract current leading mode axis; result gains the grid axis at the end
        out = np.tensordot(out, phi, axes=([0], [0]))
    # axes are now (F, G1, ..., GM)
    return np.moveaxis(out, 0, -1)


def mode_marginal_density(psi: FockWavefunction, mode: int, grid: np.ndarray) -> np.ndarray:
    """Exact single-coordinate marginal of the position density."""
    a = np.moveaxis(psi.amplitudes, mode, 0)
    a = a.reshape(a.shape[0], -1)
    rho = a @ a.conj().T  # reduced density matrix of the mode
    w = psi.frequencies[mode]
    phi = w**0.25 * hermite_functions(psi.n_max[mode], np.sqrt(w) * np.asarray(grid))
    return np.einsum("ng,nm,mg->g", phi, rho, phi).real
