"""Physical-space beables and branch analysis.

Mode quadratures map to 3-space fields through the finite expansion

    A_T(x) = (2 pi)^{-3/2} sqrt(2) sum_{pairs p, l} eps^l_p
             [ a cos(k_p . x) - b sin(k_p . x) ],

the pair {k, -k} contributing once with q_l(k_rep) = (a + i b)/sqrt(2).
B = curl A_T follows analytically; E_T = -dA_T/dt uses centered differences
of the realized trajectory.  All fields are transverse by construction,
which the spectral divergence check verifies on commensurate lattices.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .guidance import Trajectory, make_view, velocity_and_density
from .model import BranchRule, HamiltonianSpec, Lattice, ModeBasis
from .solver_fock import FockWavefunction, tensor_grid_values
from .solver_grid import WavefunctionGrid

_NORM = (2 * np.pi) ** -1.5


class BeableError(ValueError):
    pass


class AliasingError(BeableError):
    """Mode wavevector is not resolvable on the evaluation lattice."""


class NodeDensityError(BeableError):
    """Density at the beable configuration is below the node floor."""


@dataclass
class FieldSnapshot:
    """Vector field sampled on a periodic evaluation lattice."""

    lattice: Lattice
    kind: str                 # A_T | B | E_T
    values: np.ndarray        # (nx, ny, nz, 3)
    time: float
    basis_hash: str = ""


def basis_hash(basis: ModeBasis) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(basis.representatives).tobytes())
    h.update(np.ascontiguousarray(basis.polarization_vectors).tobytes())
    return h.hexdigest()[:16]


def _check_lattice(basis: ModeBasis, lattice: Lattice) -> None:
    for p in range(basis.n_pairs):
        k = basis.representatives[p]
        for i in range(3):
            cycles = k[i] * lattice.extent[i] / (2 * np.pi)
            if abs(cycles - round(cycles)) > 1e-9:
                raise AliasingError(f"mode k={k} is not periodic on the lattice")
            if abs(round(cycles)) > lattice.shape[i] // 2:
                raise AliasingError(f"mode k={k} exceeds the lattice Nyquist limit")


def _pair_quadratures(basis: ModeBasis, q: np.ndarray, p: int, l: int) -> tuple[float, float]:
    return float(q[basis.quad_real[p, l]]), float(q[basis.quad_imag[p, l]])


def _expand(basis: ModeBasis, q: np.ndarray, lattice: Lattice, mode: str) -> np.ndarray:
    """Shared finite-sum expansion; mode selects the A_T or B kernel."""
    pts = lattice.points()  # (nx, ny, nz, 3)
    out = np.zeros(pts.shape)
    for p in range(basis.n_pairs):
        k = basis.representatives[p]
        phase = pts @ k
        cos, sin = np.cos(phase), np.sin(phase)
        for l in (0, 1):
            eps = basis.pair_polarization(p, l + 1)
            a, b = _pair_quadratures(basis, q, p, l)
            if mode == "A":
                out += np.multiply.outer(a * cos - b * sin, eps)
            else:  # B: curl kernel
                kxe = np.cross(k, eps)
                out -= np.multiply.outer(a * sin + b * cos, kxe)
    return _NORM * np.sqrt(2.0) * out


def reconstruct_A(basis: ModeBasis, q, lattice: Lattice, time: float = 0.0) -> FieldSnapshot:
    """Transverse vector potential beable A_T(x) for quadratures q."""
    q = np.asarray(q, dtype=float)
    if q.shape != (basis.n_quadratures,):
        raise BeableError(f"q must have {basis.n_quadratures} quadratures")
    _check_lattice(basis, lattice)
    return FieldSnapshot(lattice, "A_T", _expand(basis, q, lattice, "A"), time, basis_hash(basis))


def reconstruct_B(basis: ModeBasis, q, lattice: Lattice, time: float = 0.0) -> FieldSnapshot:
    """Magnetic-field beable B = curl A_T."""
    q = np.asarray(q, dtype=float)
    if q.shape != (basis.n_quadratures,):
        raise BeableError(f"q must have {basis.n_quadratures} quadratures")
    _check_lattice(basis, lattice)
    return FieldSnapshot(lattice, "B", _expand(basis, q, lattice, "B"), time, basis_hash(basis))


def reconstruct_E_T(basis: ModeBasis, trajectory: Trajectory, t: float, lattice: Lattice) -> FieldSnapshot:
    """E_T = -dA_T/dt from a centered difference along the trajectory."""
    times = trajectory.times
    i = int(np.argmin(np.abs(times - t)))
    if abs(times[i] - t) > 1e-9 * max(1.0, abs(t)):
        raise BeableError(f"time {t} is not a trajectory sample")
    if i <= 0 or i >= len(times) - 1:
        raise BeableError("centered stencil needs a time strictly inside the trajectory")
    qdot = (trajectory.points[i + 1] - trajectory.points[i - 1]) / (times[i + 1] - times[i - 1])
    _check_lattice(basis, lattice)
    values = -_expand(basis, qdot, lattice, "A")
    return FieldSnapshot(lattice, "E_T", values, float(times[i]), basis_hash(basis))


# ---------------------------------------------------------------------------
# Spectral checks


def _fft_wavenumbers(lattice: Lattice) -> list[np.ndarray]:
    return [
        2 * np.pi * scipy.fft.fftfreq(lattice.shape[i], d=lattice.extent[i] / lattice.shape[i])
        for i in range(3)
    ]


def spectral_divergence(snapshot: FieldSnapshot) -> np.ndarray:
    ks = np.meshgrid(*_fft_wavenumbers(snapshot.lattice), indexing="ij")
    out = np.zeros(snapshot.values.shape[:-1], dtype=complex)
    for i in range(3):
        ft = scipy.fft.fftn(snapshot.values[..., i])
        out += scipy.fft.ifftn(1j * ks[i] * ft)
    return out.real


def spectral_curl(snapshot: FieldSnapshot) -> FieldSnapshot:
    ks = np.meshgrid(*_fft_wavenumbers(snapshot.lattice), indexing="ij")
    ft = [scipy.fft.fftn(snapshot.values[..., i]) for i in range(3)]
    curl = np.empty_like(snapshot.values)
    pairs = ((1, 2), (2, 0), (0, 1))
    for i, (a, b) in enumerate(pairs):
        curl[..., i] = scipy.fft.ifftn(1j * (ks[a] * ft[b] - ks[b] * ft[a])).real
    return FieldSnapshot(snapshot.lattice, f"curl({snapshot.kind})", curl, snapshot.time, snapshot.basis_hash)


# ---------------------------------------------------------------------------
# Local expectation values (fermionic beables without extra dynamics)


def local_expectation(wavefunction, op_blocks, q, model: HamiltonianSpec | None = None,
                      density_floor: float = 0.0) -> np.ndarray:
    """Local expectation value field of an F x F operator kernel.

    ``op_blocks`` has shape (..., F, F), Hermitian in the last two axes;
    the result has the leading shape of ``op_blocks`` and is real.
    """
    view = make_view(wavefunction, model)
    blocks = np.asarray(op_blocks, dtype=complex)
    F = view.internal_dim
    if blocks.shape[-2:] != (F, F):
        raise BeableError(f"operator blocks must end in ({F}, {F})")
    defect = np.max(np.abs(blocks - np.conj(np.swapaxes(blocks, -1, -2))))
    scale = max(float(np.max(np.abs(blocks))), 1e-300)
    if defect > 1e-10 * scale:
        raise BeableError("operator blocks are not Hermitian")

    pts = np.atleast_2d(np.asarray(q, dtype=float))
    vals = view.values(pts)[0]  # (F,)
    rho = float(np.sum(np.abs(vals) ** 2))
    if rho <= density_floor:
        raise NodeDensityError(f"density {rho:.3e} at the beable configuration is below the node floor")
    num = np.einsum("f,...fg,g->...", np.conj(vals), blocks, vals)
    out = num / rho
    if np.max(np.abs(out.imag)) > 1e-12 * max(1.0, np.max(np.abs(out.real))):
        raise BeableError("local expectation value has a non-negligible imaginary part")
    return out.real


# ---------------------------------------------------------------------------
# Branch analysis


class BranchDecomposition:
    """Branches of a wavefunction plus overlap/weight/membership queries."""

    def __init__(self, components: list, model: HamiltonianSpec | None = None,
                 labels: list[str] | None = None):
        if not components:
            raise BeableError("need at least one branch component")
        self.components = components
        self.model = model
        self.labels = labels or [f"branch_{i}" for i in range(len(components))]
        self._views = None

    @property
    def size(self) -> int:
        return len(self.components)

    def _component_views(self):
        if self._views is None:
            self._views = [make_view(c, self.model) for c in self.components]
        return self._views

    def weights(self) -> np.ndarray:
        """Integrated probability per branch (exact quadrature/Parseval)."""
        out = np.empty(self.size)
        for i, c in enumerate(self.components):
            out[i] = c.norm_sq()
        return out

    def coverage_residual(self) -> float:
        return abs(1.0 - float(np.sum(self.weights())))

    def overlap_matrix(self) -> np.ndarray:
        """Normalized overlaps O_ij = int |Psi_i||Psi_j| / sqrt(w_i w_j)."""
        w = self.weights()
        out = np.eye(self.size)
        for i in range(self.size):
            for j in range(i + 1, self.size):
                raw = _overlap_integral(self.components[i], self.components[j])
                denom = np.sqrt(w[i] * w[j])
                out[i, j] = out[j, i] = raw / denom if denom > 0 else 0.0
        return out

    def member_densities(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rho = np.empty((self.size, pts.shape[0]))
        for i, view in enumerate(self._component_views()):
            vals = view.values(pts)
            rho[i] = np.sum(np.abs(vals) ** 2, axis=-1)
        return rho

    def membership(self, points: np.ndarray) -> np.ndarray:
        """Branch index owning each beable point (largest branch density)."""
        return np.argmax(self.member_densities(points), axis=0)

    def branch_velocity(self, branch: int, points: np.ndarray) -> np.ndarray:
        """Velocity computed from one branch component alone."""
        view = self._component_views()[branch]
        v, _ = velocity_and_density(view, np.atleast_2d(np.asarray(points, dtype=float)), self.model)
        return v


def _overlap_integral(a, b) -> float:
    """int |Psi_a||Psi_b| over configuration space (unnormalized)."""
    if isinstance(a, WavefunctionGrid) and isinstance(b, WavefunctionGrid):
        ra = a.density()
        rb = b.density()
        return float(np.sum(np.sqrt(ra * rb)) * a.cell_volume)
    if isinstance(a, FockWavefunction) and isinstance(b, FockWavefunction):
        if a.mode_count > 4:
            raise BeableError("overlap quadrature supports at most 4 mode coordinates")
        grids = [a.mode_grid(j, points=max(65, 4 * a.n_max[j] + 33)) for j in range(a.mode_count)]
        steps = [g[1] - g[0] for g in grids]
        dv = float(np.prod(steps))
        total = 0.0
        # chunk over the first coordinate to bound the tensor-grid memory
        chunk = max(1, int(2e6 / max(1, np.prod([len(g) for g in grids[1:]]))))
        for start in range(0, len(grids[0]), chunk):
            sub = [grids[0][start : start + chunk]] + grids[1:]
            va = tensor_grid_values(a, sub)
            vb = tensor_grid_values(b, sub)
            rho_a = np.sum(np.abs(va) ** 2, axis=-1)
            rho_b = np.sum(np.abs(vb) ** 2, axis=-1)
            total += float(np.sum(np.sqrt(rho_a * rho_b)))
        return total * dv
    raise BeableError("overlap needs two components of the same representation")


def label_projection_branches(wavefunction, vectors, model=None) -> BranchDecomposition:
    """Branches Psi_k = chi_k (chi_k^dagger Psi) for label-space vectors chi_k."""
    vec = np.asarray(vectors, dtype=complex)
    comps = []
    if isinstance(wavefunction, WavefunctionGrid):
        F = wavefunction.internal_dim
        if vec.ndim != 2 or vec.shape[1] != F:
            raise BeableError(f"branch vectors must be rows of length {F}")
        for chi in vec:
            proj = wavefunction.amplitudes @ np.conj(chi)
            comps.append(WavefunctionGrid(wavefunction.axes, proj[..., None] * chi, wavefunction.time))
    elif isinstance(wavefunction, FockWavefunction):
        F = wavefunction.fermion_dim
        if vec.ndim != 2 or vec.shape[1] != F:
            raise BeableError(f"branch vectors must be rows of length {F}")
        for chi in vec:
            proj = wavefunction.amplitudes @ np.conj(chi)
            comps.append(FockWavefunction(
                wavefunction.frequencies, wavefunction.n_max, proj[..., None] * chi, wavefunction.time
            ))
    else:
        raise BeableError(f"cannot project branches of {type(wavefunction).__name__}")
    return BranchDecomposition(comps, model)


def superlevel_branches(wavefunction: WavefunctionGrid, threshold: float = 1e-3,
                        model=None) -> BranchDecomposition:
    """Connected superlevel sets of the density as branches (1-D/2-D grids).

    Every grid cell is assigned to its nearest connected component, so the
    partition covers the full support; components carry the masked
    amplitudes (densities and weights well defined, phases only inside the
    original superlevel region).
    """
    from scipy import ndimage

    if wavefunction.dimension > 2:
        raise BeableError("automatic superlevel branches support 1-D/2-D only")
    rho = wavefunction.density()
    mask = rho >= threshold * rho.max()
    labels, count = ndimage.label(mask)
    if count == 0:
        raise BeableError("no density above the superlevel threshold")
    # assign below-threshold cells to the nearest labeled cell
    _, idx = ndimage.distance_transform_edt(~mask, return_indices=True)
    full = labels[tuple(idx)]
    comps = []
    for lbl in range(1, count + 1):
        sel = (full == lbl).astype(float)
        comps.append(WavefunctionGrid(
            wavefunction.axes, wavefunction.amplitudes * sel[..., None], wavefunction.time
        ))
    dec = BranchDecomposition(comps, model)
    dec.partition_labels = full
    return dec


def build_branches(wavefunction, rule: BranchRule, model=None) -> BranchDecomposition:
    if rule.rule == "label_projection":
        return label_projection_branches(wavefunction, rule.vectors, model)
    if rule.rule == "superlevel":
        return superlevel_branches(wavefunction, rule.threshold, model)
    raise BeableError(f"unknown branch rule {rule.rule!r}")


def branch_analysis(wavefunction, partition, model=None, coverage_tol: float = 1e-6):
    """(overlaps, weights, membership) for a declared or automatic partition.

    ``partition`` is a BranchRule, or an explicit list of component
    wavefunctions in the same representation as ``wavefunction``.
    """
    if isinstance(partition, BranchRule):
        dec = build_branches(wavefunction, partition, model)
    else:
        dec = BranchDecomposition(list(partition), model)
    residual = dec.coverage_residual()
    if residual > coverage_tol:
        raise BeableError(
            f"branch partition misses probability {residual:.3e} (> {coverage_tol:.1e})"
        )
    return dec.overlap_matrix(), dec.weights(), dec.membership
