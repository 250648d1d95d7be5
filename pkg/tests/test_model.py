import numpy as np
import pytest

from pilotwave.model import (
    BranchRule,
    EnsembleSettings,
    FieldModeHamiltonian,
    FockDomain,
    GridAxis,
    GridDomain,
    ModeBasisError,
    ParticleHamiltonian,
    Scenario,
    StateSpec,
    build_mode_basis,
    validate_scenario,
)


def transverse_projector(k):
    # oracle: explicit 3x3 arithmetic for delta_ij - k_i k_j / k^2
    k = np.asarray(k, dtype=float)
    return np.eye(3) - np.outer(k, k) / (k @ k)


class TestModeBasis:
    def test_axis_aligned_polarizations(self):
        basis = build_mode_basis([[0.0, 0.0, 1.0]])
        eps1 = basis.pair_polarization(0, 1)
        eps2 = basis.pair_polarization(0, 2)
        assert np.allclose(eps1, [1.0, 0.0, 0.0])
        assert np.allclose(eps2, [0.0, 1.0, 0.0])

    def test_axis_aligned_projector(self):
        basis = build_mode_basis([[0.0, 0.0, 1.0]])
        proj = sum(
            np.outer(basis.pair_polarization(0, l), basis.pair_polarization(0, l))
            for l in (1, 2)
        )
        assert np.allclose(proj, np.diag([1.0, 1.0, 0.0]), atol=1e-15)

    def test_diagonal_wavevector_projector(self):
        k = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
        basis = build_mode_basis([k])
        proj = sum(
            np.outer(basis.pair_polarization(0, l), basis.pair_polarization(0, l))
            for l in (1, 2)
        )
        assert np.max(np.abs(proj - transverse_projector(k))) < 1e-12

    def test_invariants_random_wavevectors(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            k = rng.standard_normal(3)
            k /= np.linalg.norm(k)
            basis = build_mode_basis([k])
            for m in range(basis.wavevectors.shape[0]):
                kv = basis.wavevectors[m]
                eps = basis.polarization_vectors[m]
                assert abs(kv @ eps) < 1e-12
                assert abs(np.linalg.norm(eps) - 1.0) < 1e-12
            proj = sum(
                np.outer(basis.pair_polarization(0, l), basis.pair_polarization(0, l))
                for l in (1, 2)
            )
            assert np.max(np.abs(proj - transverse_projector(k))) < 1e-12

    def test_pair_shares_polarization(self):
        # eps^l(k) = eps^l(-k) within every retained pair
        basis = build_mode_basis([[0.3, -0.7, 1.1]])
        for l in (1, 2):
            vecs = basis.polarization_vectors[(basis.polarizations == l)]
            assert np.allclose(vecs[0], vecs[1])

    def test_quadrature_map_is_bijection(self):
        basis = build_mode_basis([[0, 0, 1.0], [0, 1.0, 0]])
        indices = np.concatenate([basis.quad_real.ravel(), basis.quad_imag.ravel()])
        assert sorted(indices) == list(range(basis.n_quadratures))
        assert basis.n_quadratures == 2 * (2 * basis.n_pairs)

    def test_closure_under_negation_accepted(self):
        basis = build_mode_basis([[0, 0, 1.0], [0, 0, -1.0]])
        assert basis.n_pairs == 1

    def test_zero_wavevector_rejected(self):
        with pytest.raises(ModeBasisError):
            build_mode_basis([[0.0, 0.0, 0.0]])

    def test_duplicate_rejected(self):
        with pytest.raises(ModeBasisError):
            build_mode_basis([[0, 0, 1.0], [0, 0, 1.0]])

    def test_quadrature_frequencies(self):
        basis = build_mode_basis([[0, 0, 2.0]])
        assert np.allclose(basis.quadrature_frequencies(), 2.0)

    def test_labels_are_csv_safe(self):
        basis = build_mode_basis([[0, 0, 1.0]])
        for label in basis.quadrature_labels():
            assert "," not in label


def _particle_scenario(**overrides):
    base = dict(
        name="test",
        model=ParticleHamiltonian(masses=(1.0,), potential="0"),
        initial_state=StateSpec("gaussian_packet", {"width": 1.0}),
        domain=GridDomain((GridAxis("x", -20.0, 20.0, 256),)),
        dt=0.01,
        t_final=1.0,
        ensemble=EnsembleSettings(samples=100, seed=1),
    )
    base.update(overrides)
    return Scenario(**base)


class TestValidateScenario:
    def test_valid_gaussian_scenario(self):
        assert validate_scenario(_particle_scenario()) == []

    def test_zero_timestep(self):
        codes = [d.code for d in validate_scenario(_particle_scenario(dt=0.0))]
        assert "INVALID_TIMESTEP" in codes

    def test_nonhermitian_block(self):
        model = FieldModeHamiltonian(
            frequencies=(1.0,),
            fermion_dim=2,
            fermion_block=((0.0, 1.0), (0.0, 0.0)),
        )
        s = _particle_scenario(
            model=model,
            domain=FockDomain((8,)),
            initial_state=StateSpec("spinor", {"components": [1.0, 0.0], "spatial": {"family": "ho_ground"}}),
        )
        codes = [d.code for d in validate_scenario(s)]
        assert "NONHERMITIAN_BLOCK" in codes

    def test_nonpositive_frequency(self):
        model = FieldModeHamiltonian(frequencies=(0.0,))
        s = _particle_scenario(model=model, domain=FockDomain((8,)),
                               initial_state=StateSpec("ho_ground"))
        codes = [d.code for d in validate_scenario(s)]
        assert "NONPOSITIVE_FREQUENCY" in codes

    def test_fock_requires_field_mode(self):
        s = _particle_scenario(domain=FockDomain((8,)))
        codes = [d.code for d in validate_scenario(s)]
        assert "FOCK_REQUIRES_FIELD_MODE" in codes

    def test_odd_stride_rejected(self):
        codes = [d.code for d in validate_scenario(_particle_scenario(trajectory_stride=3))]
        assert "INVALID_STRIDE" in codes

    def test_boundary_support_flagged(self):
        s = _particle_scenario(
            initial_state=StateSpec("gaussian_packet", {"width": 1.0, "center": [-18.0]})
        )
        codes = [d.code for d in validate_scenario(s)]
        assert "BOUNDARY_SUPPORT" in codes

    def test_grid_dimension_cap(self):
        axes = tuple(GridAxis(n, -5.0, 5.0, 16) for n in "abcd")
        s = _particle_scenario(
            model=ParticleHamiltonian(masses=(1.0,) * 4),
            domain=GridDomain(axes),
        )
        codes = [d.code for d in validate_scenario(s)]
        assert "GRID_DIM_EXCEEDED" in codes

    def test_bad_expression_named(self):
        s = _particle_scenario(model=ParticleHamiltonian(masses=(1.0,), potential="import os"))
        diags = validate_scenario(s)
        assert any(d.code == "BAD_EXPRESSION" and "model.potential" in d.where for d in diags)

    def test_branch_vector_shape(self):
        s = _particle_scenario(branches=BranchRule("label_projection", vectors=((1.0, 0.0),)))
        codes = [d.code for d in validate_scenario(s)]
        assert "BRANCH_RULE" in codes

    def test_point_distribution_needs_point(self):
        s = _particle_scenario(ensemble=EnsembleSettings(samples=10, seed=1,
                                                         initial_distribution="point"))
        codes = [d.code for d in validate_scenario(s)]
        assert "INVALID_DISTRIBUTION" in codes
