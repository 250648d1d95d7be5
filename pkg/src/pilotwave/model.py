"""Physical model definitions: mode bases, Hamiltonians, scenarios.

Conventions used throughout the package (natural units hbar = c = 1 unless a
model overrides hbar):

* Each retained complex field mode pair {k, -k} with one polarization label
  carries one complex amplitude q and is stored as two real beable
  coordinates (a, b) with q = (a + i b) / sqrt(2).  Under this substitution
  the free-field Hamiltonian decomposes into independent unit-mass harmonic
  oscillators, one per real coordinate, with frequency |k|.
* Polarization vectors are built deterministically from the pair
  representative: eps1 = normalize(z_hat x k) (x_hat if k is along z),
  eps2 = k_hat x eps1, and the same vectors are reused for -k.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .expressions import ExpressionError, compile_expression

DEFAULT_AXIS_NAMES = ("x", "y", "z")


class ModeBasisError(ValueError):
    """Invalid wavevector list for a mode basis."""


# ---------------------------------------------------------------------------
# Mode basis


@dataclass(frozen=True)
class ModeBasis:
    """Finite set of retained transverse field modes.

    ``wavevectors``/``polarizations``/``polarization_vectors`` list every
    (k, l) mode, with the list closed under k -> -k and the polarization
    vector shared within each pair.  The quadrature map ties each complex
    mode (pair p, polarization l) to two real beable coordinates: index
    ``quad_real[p, l-1]`` holds Re q_l(k_rep), ``quad_imag[p, l-1]`` holds
    Im q_l(k_rep).
    """

    wavevectors: np.ndarray           # (n_modes, 3)
    polarizations: np.ndarray         # (n_modes,) values 1, 2
    polarization_vectors: np.ndarray  # (n_modes, 3)
    pair_index: np.ndarray            # (n_modes,) pair id
    representatives: np.ndarray       # (n_pairs, 3) canonical k per pair
    quad_real: np.ndarray             # (n_pairs, 2) coordinate index
    quad_imag: np.ndarray             # (n_pairs, 2) coordinate index

    @property
    def n_pairs(self) -> int:
        return self.representatives.shape[0]

    @property
    def n_quadratures(self) -> int:
        return 4 * self.n_pairs

    def quadrature_frequencies(self) -> np.ndarray:
        """Oscillator frequency |k| for each real beable coordinate."""
        omega = np.empty(self.n_quadratures)
        for p in range(self.n_pairs):
            w = float(np.linalg.norm(self.representatives[p]))
            for l in (0, 1):
                omega[self.quad_real[p, l]] = w
                omega[self.quad_imag[p, l]] = w
        return omega

    def quadrature_labels(self) -> list[str]:
        """Coordinate labels tying quadratures to (k, polarization); no commas
        so the labels can serve as CSV column names."""
        labels = [""] * self.n_quadratures
        for p in range(self.n_pairs):
            k = self.representatives[p]
            tag = "k(" + "_".join(f"{c:g}" for c in k) + ")"
            for l in (0, 1):
                labels[self.quad_real[p, l]] = f"{tag}.l{l + 1}.re"
                labels[self.quad_imag[p, l]] = f"{tag}.l{l + 1}.im"
        return labels

    def pair_polarization(self, p: int, l: int) -> np.ndarray:
        """Polarization vector eps^l of pair p (l in {1, 2})."""
        mask = (self.pair_index == p) & (self.polarizations == l)
        return self.polarization_vectors[np.argmax(mask)]


def _polarization_pair(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    khat = k / np.linalg.norm(k)
    zxk = np.cross([0.0, 0.0, 1.0], khat)
    n = np.linalg.norm(zxk)
    if n < 1e-12:
        eps1 = np.array([1.0, 0.0, 0.0])
    else:
        eps1 = zxk / n
    eps2 = np.cross(khat, eps1)
    return eps1, eps2


def _canonical_rep(k: np.ndarray) -> np.ndarray:
    """Pick the lexicographically larger of (k, -k) as pair representative."""
    for c in k:
        if c > 0:
            return k
        if c < 0:
            return -k
    raise ModeBasisError("zero wavevector has no transverse plane")


def build_mode_basis(wavevectors) -> ModeBasis:
    """Build a ModeBasis from a list of 3-vectors.

    The list may contain both members of each {k, -k} pair or only one
    representative; the missing partner is added.  Zero and duplicate
    wavevectors are rejected.
    """
    ks = np.atleast_2d(np.asarray(wavevectors, dtype=float))
    if ks.ndim != 2 or ks.shape[1] != 3:
        raise ModeBasisError("wavevectors must be an (n, 3) array")
    if ks.shape[0] == 0:
        raise ModeBasisError("empty wavevector list")
    norms = np.linalg.norm(ks, axis=1)
    if np.any(norms < 1e-14):
        raise ModeBasisError("zero wavevector has no transverse plane")

    seen: list[np.ndarray] = []
    reps: list[np.ndarray] = []
    for k in ks:
        for prev in seen:
            if np.allclose(k, prev, atol=1e-12):
                raise ModeBasisError(f"duplicate wavevector {k}")
        seen.append(k)
        rep = _canonical_rep(k)
        if not any(np.allclose(rep, r, atol=1e-12) for r in reps):
            reps.append(rep)

    n_pairs = len(reps)
    representatives = np.array(reps)
    wv = np.empty((4 * n_pairs, 3))
    pols = np.empty(4 * n_pairs, dtype=int)
    pvecs = np.empty((4 * n_pairs, 3))
    pair_ids = np.empty(4 * n_pairs, dtype=int)
    quad_real = np.empty((n_pairs, 2), dtype=int)
    quad_imag = np.empty((n_pairs, 2), dtype=int)

    m = 0
    coord = 0
    for p, rep in enumerate(reps):
        eps = _polarization_pair(rep)
        for sign in (1.0, -1.0):
            for l in (1, 2):
                wv[m] = sign * rep
                pols[m] = l
                pvecs[m] = eps[l - 1]  # eps^l(-k) = eps^l(k)
                pair_ids[m] = p
                m += 1
        for l in (0, 1):
            quad_real[p, l] = coord
            quad_imag[p, l] = coord + 1
            coord += 2

    return ModeBasis(
        wavevectors=wv,
        polarizations=pols,
        polarization_vectors=pvecs,
        pair_index=pair_ids,
        representatives=representatives,
        quad_real=quad_real,
        quad_imag=quad_imag,
    )


# ---------------------------------------------------------------------------
# Hamiltonian specifications


@dataclass(frozen=True)
class ParticleHamiltonian:
    """Non-relativistic N-coordinate Schrodinger Hamiltonian."""

    masses: tuple[float, ...]
    potential: str = "0"
    hbar: float = 1.0

    kind = "particle_schrodinger"

    @property
    def internal_dim(self) -> int:
        return 1


@dataclass(frozen=True)
class PauliHamiltonian:
    """Single spin-1/2 particle; B(x), A(x), V(x) are scenario expressions."""

    mass: float
    charge: float = 1.0
    magnetic_moment: float = 1.0
    magnetic_field: tuple[str, str, str] = ("0", "0", "0")
    vector_potential: tuple[str, str, str] = ("0", "0", "0")
    potential: str = "0"
    hbar: float = 1.0
    light_speed: float = 1.0

    kind = "pauli"

    @property
    def internal_dim(self) -> int:
        return 2


@dataclass(frozen=True)
class FieldModeHamiltonian:
    """Mode-truncated field Hamiltonian over real quadrature coordinates.

    H = sum_j [ -(1/2) d^2/dq_j^2 + (omega_j^2/2) q_j^2 ] x I_F
        + I x (fermion_block + coulomb_block) + sum_j q_j x couplings[j]
    """

    frequencies: tuple[float, ...]
    fermion_dim: int = 1
    fermion_block: tuple = ()      # F x F rows, empty means zero
    couplings: tuple = ()          # one F x F block per coordinate, empty means zero
    coulomb_block: tuple = ()

    kind = "field_mode"

    @property
    def internal_dim(self) -> int:
        return self.fermion_dim

    @property
    def mode_count(self) -> int:
        return len(self.frequencies)

    def fermion_matrix(self) -> np.ndarray:
        """Combined constant F x F block (free fermionic + Coulomb)."""
        out = np.zeros((self.fermion_dim, self.fermion_dim), dtype=complex)
        if self.fermion_block:
            out += np.asarray(self.fermion_block, dtype=complex)
        if self.coulomb_block:
            out += np.asarray(self.coulomb_block, dtype=complex)
        return out

    def coupling_matrices(self) -> np.ndarray:
        out = np.zeros((self.mode_count, self.fermion_dim, self.fermion_dim), dtype=complex)
        if self.couplings:
            arr = np.asarray(self.couplings, dtype=complex)
            out[...] = arr
        return out


HamiltonianSpec = Union[ParticleHamiltonian, PauliHamiltonian, FieldModeHamiltonian]


# ---------------------------------------------------------------------------
# Scenario


@dataclass(frozen=True)
class GridAxis:
    name: str
    min: float
    max: float
    points: int

    def grid(self) -> np.ndarray:
        # periodic convention: right endpoint excluded
        return self.min + self.step * np.arange(self.points)

    @property
    def step(self) -> float:
        return (self.max - self.min) / self.points


@dataclass(frozen=True)
class GridDomain:
    axes: tuple[GridAxis, ...]

    @property
    def dimension(self) -> int:
        return len(self.axes)


@dataclass(frozen=True)
class FockDomain:
    n_max: tuple[int, ...]

    @property
    def dimension(self) -> int:
        return len(self.n_max)


@dataclass(frozen=True)
class NodePolicy:
    density_floor: float = 1e-12     # relative to max density
    velocity_cap: float | None = None  # None: 10x characteristic speed
    max_node_dwell: int = 100


@dataclass(frozen=True)
class StateSpec:
    """Declarative initial state: named family plus parameters.

    Families: gaussian_packet, ho_ground, coherent, number_state,
    superposition, spinor.  See states.build_* for parameter semantics.
    """

    family: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnsembleSettings:
    samples: int = 1
    seed: int = 0
    initial_distribution: str = "equilibrium"  # equilibrium | point | density
    point: tuple[float, ...] | None = None
    density: str | None = None
    checkpoints: int = 5


@dataclass(frozen=True)
class BranchRule:
    rule: str                        # label_projection | superlevel
    vectors: tuple = ()              # label_projection: rows are label-space vectors
    threshold: float = 1e-3          # superlevel: relative density threshold
    overlap_threshold: float = 1e-6  # below this, branches count as macroscopically distinct


@dataclass(frozen=True)
class Lattice:
    """Axis-aligned periodic evaluation lattice in physical 3-space."""

    extent: tuple[float, float, float]
    shape: tuple[int, int, int]

    def axis(self, i: int) -> np.ndarray:
        return np.arange(self.shape[i]) * (self.extent[i] / self.shape[i])

    def points(self) -> np.ndarray:
        gx, gy, gz = np.meshgrid(self.axis(0), self.axis(1), self.axis(2), indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class Scenario:
    name: str
    model: HamiltonianSpec
    initial_state: StateSpec
    domain: Union[GridDomain, FockDomain]
    dt: float
    t_final: float
    trajectory_stride: int = 2
    scheme: str = "auto"  # auto | split_step | crank_nicolson (grid solvers)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    node_policy: NodePolicy = field(default_factory=NodePolicy)
    branches: BranchRule | None = None
    mode_basis: ModeBasis | None = None
    basis_coordinates: tuple[int, ...] | None = None  # beable coord -> basis quadrature
    lattice: Lattice | None = None
    trajectory_bundle: int = 100
    local_operator: tuple[str, ...] | None = None  # per-label profile expressions

    @property
    def beable_dimension(self) -> int:
        return self.domain.dimension

    def axis_names(self) -> tuple[str, ...]:
        if isinstance(self.domain, GridDomain):
            return tuple(ax.name for ax in self.domain.axes)
        return tuple(f"q{i}" for i in range(self.domain.dimension))

    def with_overrides(self, **kwargs) -> "Scenario":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    where: str = ""

    def __str__(self) -> str:  # pragma: no cover - repr convenience
        loc = f" [{self.where}]" if self.where else ""
        return f"{self.code}: {self.message}{loc}"


def _is_hermitian(mat, tol: float = 1e-12) -> bool:
    m = np.asarray(mat, dtype=complex)
    return m.ndim == 2 and m.shape[0] == m.shape[1] and np.max(np.abs(m - m.conj().T)) <= tol


def validate_scenario(scenario: Scenario) -> list[Diagnostic]:
    """Check type invariants and solver compatibility; no exceptions."""
    diags: list[Diagnostic] = []
    add = diags.append

    if scenario.dt <= 0:
        add(Diagnostic("INVALID_TIMESTEP", f"dt must be > 0, got {scenario.dt}", "integration.dt"))
    if scenario.t_final < 0:
        add(Diagnostic("INVALID_TIME", f"t_final must be >= 0, got {scenario.t_final}", "integration.t_final"))
    if scenario.ensemble.samples < 1:
        add(Diagnostic("INVALID_SAMPLES", "ensemble needs at least one sample", "ensemble.samples"))
    if scenario.trajectory_stride < 2 or scenario.trajectory_stride % 2 != 0:
        add(Diagnostic(
            "INVALID_STRIDE",
            f"trajectory_stride must be even and >= 2 (RK4 midpoints), got {scenario.trajectory_stride}",
            "integration.trajectory_stride",
        ))
    if not (0 < scenario.node_policy.density_floor < 1):
        add(Diagnostic("NODE_POLICY_INVALID", "density_floor must be in (0, 1)", "node_policy.density_floor"))
    if scenario.scheme not in ("auto", "split_step", "crank_nicolson"):
        add(Diagnostic("INVALID_SCHEME", f"unknown scheme {scenario.scheme!r}", "integration.scheme"))
    elif scenario.scheme == "split_step" and scenario.model.internal_dim > 1:
        add(Diagnostic("INVALID_SCHEME", "split_step requires internal_dim == 1", "integration.scheme"))

    model = scenario.model
    if isinstance(scenario.domain, GridDomain):
        if scenario.domain.dimension > 3:
            add(Diagnostic("GRID_DIM_EXCEEDED", "grid solvers support at most 3 coordinates", "domain"))
        for ax in scenario.domain.axes:
            if ax.points < 8 or ax.max <= ax.min:
                add(Diagnostic("INVALID_AXIS", f"axis {ax.name} must be increasing with >= 8 points", f"domain.{ax.name}"))
    else:
        if model.kind != "field_mode":
            add(Diagnostic("FOCK_REQUIRES_FIELD_MODE", "Fock domain is only valid for field_mode models", "domain"))
        for i, n in enumerate(scenario.domain.n_max):
            if n < 1:
                add(Diagnostic("INVALID_TRUNCATION", f"n_max must be >= 1, got {n}", f"domain.n_max[{i}]"))

    if model.kind == "particle_schrodinger":
        if isinstance(scenario.domain, GridDomain) and len(model.masses) != scenario.domain.dimension:
            add(Diagnostic("DIM_MISMATCH", "one mass per grid coordinate required", "model.masses"))
        if any(m <= 0 for m in model.masses):
            add(Diagnostic("INVALID_MASS", "masses must be positive", "model.masses"))
        _check_expressions(diags, scenario, [("model.potential", model.potential)])
    elif model.kind == "pauli":
        if model.mass <= 0:
            add(Diagnostic("INVALID_MASS", "mass must be positive", "model.mass"))
        exprs = [("model.potential", model.potential)]
        exprs += [(f"model.magnetic_field[{i}]", s) for i, s in enumerate(model.magnetic_field)]
        exprs += [(f"model.vector_potential[{i}]", s) for i, s in enumerate(model.vector_potential)]
        _check_expressions(diags, scenario, exprs)
    elif model.kind == "field_mode":
        if any(w <= 0 for w in model.frequencies):
            add(Diagnostic("NONPOSITIVE_FREQUENCY", "mode frequencies must be strictly positive", "model.frequencies"))
        if isinstance(scenario.domain, GridDomain) and scenario.domain.dimension != model.mode_count:
            add(Diagnostic("DIM_MISMATCH", "grid dimension must equal the coordinate count", "domain"))
        if isinstance(scenario.domain, FockDomain) and scenario.domain.dimension != model.mode_count:
            add(Diagnostic("DIM_MISMATCH", "one n_max per coordinate required", "domain.n_max"))
        F = model.fermion_dim
        for label, block in (("fermion_block", model.fermion_block), ("coulomb_block", model.coulomb_block)):
            if block and not _is_hermitian(block):
                add(Diagnostic("NONHERMITIAN_BLOCK", f"{label} must be an Hermitian {F}x{F} matrix", f"model.{label}"))
        if model.couplings:
            g = np.asarray(model.couplings, dtype=complex)
            if g.shape != (model.mode_count, F, F):
                add(Diagnostic("DIM_MISMATCH", "need one FxF coupling block per coordinate", "model.couplings"))
            else:
                for j in range(model.mode_count):
                    if not _is_hermitian(g[j]):
                        add(Diagnostic("NONHERMITIAN_BLOCK", f"coupling block {j} is not Hermitian", f"model.couplings[{j}]"))
    else:  # pragma: no cover - dataclasses fix the kinds
        add(Diagnostic("UNKNOWN_MODEL", f"unknown model kind {model.kind!r}", "model"))

    if scenario.mode_basis is not None:
        basis = scenario.mode_basis
        if scenario.basis_coordinates is not None:
            bc = scenario.basis_coordinates
            if (len(bc) != scenario.beable_dimension or len(set(bc)) != len(bc)
                    or any(not 0 <= i < basis.n_quadratures for i in bc)):
                add(Diagnostic(
                    "BASIS_DIM",
                    "basis_coordinates must map each beable coordinate to a distinct quadrature",
                    "basis_coordinates",
                ))
        elif basis.n_quadratures != scenario.beable_dimension:
            add(Diagnostic(
                "BASIS_DIM",
                f"mode basis has {basis.n_quadratures} quadratures but the beable space has "
                f"{scenario.beable_dimension} coordinates (set basis_coordinates to embed)",
                "mode_basis",
            ))
        if scenario.lattice is not None:
            for p in range(basis.n_pairs):
                k = basis.representatives[p]
                for i in range(3):
                    cycles = k[i] * scenario.lattice.extent[i] / (2 * np.pi)
                    if abs(cycles - round(cycles)) > 1e-9:
                        add(Diagnostic("LATTICE_ALIAS", f"mode k={k} is not periodic on the lattice", "lattice"))
                    elif abs(round(cycles)) > scenario.lattice.shape[i] // 2:
                        add(Diagnostic("LATTICE_ALIAS", f"mode k={k} exceeds the lattice Nyquist limit", "lattice"))

    if scenario.branches is not None:
        br = scenario.branches
        if br.rule == "label_projection":
            vec = np.asarray(br.vectors, dtype=complex)
            if vec.ndim != 2 or vec.shape[1] != model.internal_dim:
                add(Diagnostic("BRANCH_RULE", "branch vectors must be rows in label space", "branches.vectors"))
        elif br.rule != "superlevel":
            add(Diagnostic("BRANCH_RULE", f"unknown branch rule {br.rule!r}", "branches.rule"))

    if scenario.ensemble.initial_distribution not in ("equilibrium", "point", "density"):
        add(Diagnostic("INVALID_DISTRIBUTION", "initial_distribution must be equilibrium, point, or density", "ensemble"))
    if scenario.ensemble.initial_distribution == "point" and scenario.ensemble.point is None:
        add(Diagnostic("INVALID_DISTRIBUTION", "point distribution requires a point", "ensemble.point"))

    if not diags:
        diags.extend(_check_initial_state(scenario))
    return diags


def _check_expressions(diags, scenario, labeled_sources) -> None:
    names = scenario.axis_names()
    for where, src in labeled_sources:
        try:
            compile_expression(src, names)
        except ExpressionError as exc:
            diags.append(Diagnostic("BAD_EXPRESSION", str(exc), where))


def _check_initial_state(scenario: Scenario) -> list[Diagnostic]:
    """Build the initial state and police boundary support on grids."""
    from . import states  # deferred: states imports model

    diags: list[Diagnostic] = []
    try:
        if isinstance(scenario.domain, GridDomain):
            psi = states.build_grid_state(scenario)
            band = max(1, int(0.05 * min(ax.points for ax in scenario.domain.axes)))
            amax = float(np.max(np.abs(psi.amplitudes)))
            for d, ax in enumerate(scenario.domain.axes):
                sl = [slice(None)] * psi.amplitudes.ndim
                for edge in (slice(0, band), slice(-band, None)):
                    sl[d] = edge
                    if float(np.max(np.abs(psi.amplitudes[tuple(sl)]))) > 1e-10 * max(amax, 1.0):
                        diags.append(Diagnostic(
                            "BOUNDARY_SUPPORT",
                            f"initial state is not negligible within 5% of the {ax.name} boundary",
                            f"domain.{ax.name}",
                        ))
                        break
        else:
            states.build_fock_state(scenario)
    except states.StateError as exc:
        diags.append(Diagnostic("INVALID_STATE", str(exc), "initial_state"))
    return diags
