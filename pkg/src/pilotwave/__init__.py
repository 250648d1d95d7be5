"""Pilot-wave dynamics simulator: guided particles, spinors, and field beables."""

__version__ = "0.1.0"

from .model import (
    BranchRule,
    Diagnostic,
    EnsembleSettings,
    FieldModeHamiltonian,
    FockDomain,
    GridAxis,
    GridDomain,
    Lattice,
    ModeBasis,
    NodePolicy,
    ParticleHamiltonian,
    PauliHamiltonian,
    Scenario,
    StateSpec,
    build_mode_basis,
    validate_scenario,
)

__all__ = [
    "BranchRule",
    "Diagnostic",
    "EnsembleSettings",
    "FieldModeHamiltonian",
    "FockDomain",
    "GridAxis",
    "GridDomain",
    "Lattice",
    "ModeBasis",
    "NodePolicy",
    "ParticleHamiltonian",
    "PauliHamiltonian",
    "Scenario",
    "StateSpec",
    "build_mode_basis",
    "validate_scenario",
    "__version__",
]
