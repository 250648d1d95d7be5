import numpy as np
import pytest

from pilotwave.model import (
    FieldModeHamiltonian,
    FockDomain,
    GridAxis,
    GridDomain,
    ParticleHamiltonian,
    PauliHamiltonian,
    Scenario,
    StateSpec,
)
from pilotwave.solver_fock import tensor_grid_values
from pilotwave.states import StateError, build_fock_state, build_grid_state


def _scenario(model, domain, state):
    return Scenario(name="s", model=model, initial_state=state, domain=domain,
                    dt=0.01, t_final=1.0)


def test_gaussian_packet_density_width():
    ax = GridAxis("x", -20.0, 20.0, 512)
    s = _scenario(ParticleHamiltonian(masses=(1.0,)), GridDomain((ax,)),
                  StateSpec("gaussian_packet", {"width": 1.3, "momentum": 0.7}))
    psi = build_grid_state(s)
    x = psi.grids()[0]
    rho = psi.density()
    var = np.sum(rho * x**2) * psi.cell_volume
    assert abs(psi.norm_sq() - 1.0) < 1e-12
    assert abs(np.sqrt(var) - 1.3) < 1e-6


def test_ho_ground_matches_gaussian():
    # ground state of frequency w, mass m: position std = sqrt(hbar/(2 m w))
    ax = GridAxis("x", -15.0, 15.0, 512)
    s = _scenario(ParticleHamiltonian(masses=(2.0,)), GridDomain((ax,)),
                  StateSpec("ho_ground", {"frequency": 1.5}))
    psi = build_grid_state(s)
    x = psi.grids()[0]
    var = np.sum(psi.density() * x**2) * psi.cell_volume
    assert abs(var - 1.0 / (2 * 2.0 * 1.5)) < 1e-10


def test_coherent_grid_matches_fock_evaluation():
    # the same coherent state built on a grid and in the number basis must
    # agree pointwise, constant phase included
    model = FieldModeHamiltonian(frequencies=(1.0, 2.0))
    grid_axes = (GridAxis("q0", -10.0, 10.0, 256), GridAxis("q1", -8.0, 8.0, 256))
    alpha = [[1.2, 0.4], [-0.3, 0.9]]  # complex entries as [re, im]
    s_grid = _scenario(model, GridDomain(grid_axes), StateSpec("coherent", {"alpha": alpha}))
    s_fock = _scenario(model, FockDomain((28, 28)), StateSpec("coherent", {"alpha": alpha}))
    psi_grid = build_grid_state(s_grid)
    psi_fock = build_fock_state(s_fock)
    vals = tensor_grid_values(psi_fock, [ax.grid() for ax in grid_axes])
    assert np.max(np.abs(vals - psi_grid.amplitudes)) < 1e-10


def test_number_state_grid_matches_fock():
    model = FieldModeHamiltonian(frequencies=(1.0,))
    ax = GridAxis("q0", -10.0, 10.0, 256)
    s_grid = _scenario(model, GridDomain((ax,)), StateSpec("number_state", {"n": [2]}))
    s_fock = _scenario(model, FockDomain((8,)), StateSpec("number_state", {"n": [2]}))
    psi_grid = build_grid_state(s_grid)
    vals = tensor_grid_values(build_fock_state(s_fock), [ax.grid()])
    assert np.max(np.abs(vals - psi_grid.amplitudes)) < 1e-12


def test_superposition_normalized():
    model = FieldModeHamiltonian(frequencies=(1.0,))
    ax = GridAxis("q0", -10.0, 10.0, 256)
    s = _scenario(model, GridDomain((ax,)), StateSpec("superposition", {
        "terms": [[0.6, {"family": "ho_ground"}], [0.8, {"family": "number_state", "n": [1]}]],
    }))
    psi = build_grid_state(s)
    assert abs(psi.norm_sq() - 1.0) < 1e-12


def test_spinor_composition():
    model = PauliHamiltonian(mass=1.0)
    ax = GridAxis("x", -20.0, 20.0, 256)
    s = _scenario(model, GridDomain((ax,)), StateSpec("spinor", {
        "components": [0.6, 0.8],
        "spatial": {"family": "gaussian_packet", "width": 1.0},
    }))
    psi = build_grid_state(s)
    assert psi.internal_dim == 2
    up = np.sum(np.abs(psi.amplitudes[..., 0]) ** 2) * psi.cell_volume
    assert abs(up - 0.36) < 1e-12


def test_scalar_family_rejected_for_spinor_model():
    model = PauliHamiltonian(mass=1.0)
    ax = GridAxis("x", -20.0, 20.0, 256)
    s = _scenario(model, GridDomain((ax,)), StateSpec("gaussian_packet", {"width": 1.0}))
    with pytest.raises(StateError):
        build_grid_state(s)


def test_unknown_family_rejected():
    ax = GridAxis("x", -20.0, 20.0, 256)
    s = _scenario(ParticleHamiltonian(masses=(1.0,)), GridDomain((ax,)),
                  StateSpec("mystery", {}))
    with pytest.raises(StateError):
        build_grid_state(s)


def test_fock_occupation_beyond_truncation_rejected():
    model = FieldModeHamiltonian(frequencies=(1.0,))
    s = _scenario(model, FockDomain((4,)), StateSpec("number_state", {"n": [5]}))
    with pytest.raises(StateError):
        build_fock_state(s)
