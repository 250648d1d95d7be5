"""Initial wavefunction construction from declarative state families.

Families (scenario ``initial_state``):

* ``gaussian_packet(center, width, momentum)`` — product Gaussian;
  ``width`` is the standard deviation of the position density |psi|^2.
* ``ho_ground(frequency, center)`` — harmonic ground state per coordinate;
  particle models use the model masses and hbar, field models unit mass.
  With no ``frequency`` given, a field model's own frequencies are used
  (the field vacuum).
* ``coherent(alpha)`` — field models; one complex alpha per coordinate.
* ``number_state(n)`` — field models; occupation per coordinate.
* ``superposition(terms: [[coeff, state], ...])`` — normalized sum.
* ``spinor(components, spatial)`` — internal-label vector times a scalar
  spatial state (Pauli spinors and fermionic labels alike).
"""

from __future__ import annotations

import numpy as np

from .model import FockDomain, GridDomain, Scenario, StateSpec


class StateError(ValueError):
    """Invalid initial-state specification."""


def _as_complex(value) -> complex:
    if isinstance(value, (list, tuple)):
        re, im = value
        return complex(re, im)
    return complex(value)


def _as_state_spec(obj) -> StateSpec:
    if isinstance(obj, StateSpec):
        return obj
    if isinstance(obj, dict):
        d = dict(obj)
        family = d.pop("family", None)
        if family is None:
            raise StateError("state spec needs a 'family' key")
        return StateSpec(family=family, params=d)
    raise StateError(f"cannot interpret {obj!r} as a state")


def _vector_param(params: dict, key: str, dim: int, default=None):
    if key not in params:
        if default is None:
            raise StateError(f"state family needs parameter {key!r}")
        return np.full(dim, float(default))
    raw = params[key]
    if np.isscalar(raw):
        return np.full(dim, float(raw))
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (dim,):
        raise StateError(f"parameter {key!r} must have one entry per coordinate ({dim})")
    return arr


# ---------------------------------------------------------------------------
# Grid representation


def build_grid_state(scenario: Scenario):
    """Build the scenario's initial state as a WavefunctionGrid."""
    from .solver_grid import WavefunctionGrid

    domain = scenario.domain
    if not isinstance(domain, GridDomain):
        raise StateError("build_grid_state needs a grid domain")
    grids = [ax.grid() for ax in domain.axes]
    F = scenario.model.internal_dim
    scalar = _grid_scalar_or_spinor(scenario.initial_state, scenario, grids, F)
    if scalar.ndim == len(grids):  # scalar family on an internal_dim > 1 model
        if F != 1:
            raise StateError("models with internal structure need a spinor (or superposition of spinors) initial state")
        scalar = scalar[..., np.newaxis]
    psi = WavefunctionGrid(axes=domain.axes, amplitudes=np.ascontiguousarray(scalar), time=0.0)
    psi.normalize()
    return psi


def _grid_scalar_or_spinor(spec: StateSpec, scenario: Scenario, grids, F: int) -> np.ndarray:
    spec = _as_state_spec(spec)
    params = spec.params
    if spec.family == "spinor":
        comps = np.asarray([_as_complex(c) for c in params.get("components", ())])
        if comps.shape != (F,):
            raise StateError(f"spinor components must have length {F}")
        spatial = _grid_scalar(_as_state_spec(params["spatial"]), scenario, grids)
        return spatial[..., np.newaxis] * comps
    if spec.family == "superposition":
        total = None
        for coeff, sub in params.get("terms", ()):
            term = _as_complex(coeff) * _grid_scalar_or_spinor(_as_state_spec(sub), scenario, grids, F)
            total = term if total is None else total + term
        if total is None:
            raise StateError("superposition needs at least one term")
        return total
    return _grid_scalar(spec, scenario, grids)


def _grid_scalar(spec: StateSpec, scenario: Scenario, grids) -> np.ndarray:
    """Scalar (no internal index) state on the tensor grid."""
    dim = len(grids)
    params = spec.params
    mesh = np.meshgrid(*grids, indexing="ij") if dim > 1 else [grids[0]]

    if spec.family == "gaussian_packet":
        center = _vector_param(params, "center", dim, default=0.0)
        width = _vector_param(params, "width", dim)
        momentum = _vector_param(params, "momentum", dim, default=0.0)
        hbar = getattr(scenario.model, "hbar", 1.0)
        out = np.ones_like(mesh[0], dtype=complex)
        for d in range(dim):
            x = mesh[d] - center[d]
            s = width[d]
            out = out * (2 * np.pi * s**2) ** (-0.25) * np.exp(-x**2 / (4 * s**2) + 1j * momentum[d] * x / hbar)
        return out

    if spec.family == "ho_ground":
        freq = _default_frequencies(params, scenario, dim)
        center = _vector_param(params, "center", dim, default=0.0)
        masses = _oscillator_masses(scenario, dim)
        hbar = getattr(scenario.model, "hbar", 1.0)
        out = np.ones_like(mesh[0], dtype=complex)
        for d in range(dim):
            a = masses[d] * freq[d] / hbar
            out = out * (a / np.pi) ** 0.25 * np.exp(-a * (mesh[d] - center[d]) ** 2 / 2)
        return out

    if spec.family == "coherent":
        _require_field(scenario, spec.family)
        alphas = params.get("alpha")
        if alphas is None:
            raise StateError("coherent needs 'alpha'")
        alphas = [_as_complex(a) for a in (alphas if isinstance(alphas, (list, tuple)) else [alphas])]
        if len(alphas) != dim:
            raise StateError(f"coherent needs one alpha per coordinate ({dim})")
        out = np.ones_like(mesh[0], dtype=complex)
        for d in range(dim):
            w = scenario.model.frequencies[d]
            xi = np.sqrt(w) * mesh[d]
            a = alphas[d]
            # Hermite generating function: matches the Fock coherent state
            # including its constant phase.
            out = out * (w / np.pi) ** 0.25 * np.exp(-abs(a) ** 2 / 2 - a**2 / 2 + np.sqrt(2) * a * xi - xi**2 / 2)
        return out

    if spec.family == "number_state":
        _require_field(scenario, spec.family)
        from .solver_fock import hermite_functions

        ns = params.get("n")
        ns = list(ns) if isinstance(ns, (list, tuple)) else [ns]
        if len(ns) != dim:
            raise StateError(f"number_state needs one occupation per coordinate ({dim})")
        out = np.ones_like(mesh[0], dtype=complex)
        for d in range(dim):
            w = scenario.model.frequencies[d]
            xi = np.sqrt(w) * np.asarray(mesh[d])
            h = hermite_functions(int(ns[d]), xi.ravel()).reshape((int(ns[d]) + 1,) + xi.shape)
            out = out * w**0.25 * h[int(ns[d])]
        return out

    raise StateError(f"unknown state family {spec.family!r}")


def _require_field(scenario: Scenario, family: str) -> None:
    if scenario.model.kind != "field_mode":
        raise StateError(f"state family {family!r} requires a field_mode model")


def _default_frequencies(params: dict, scenario: Scenario, dim: int) -> np.ndarray:
    if "frequency" in params:
        return _vector_param(params, "frequency", dim)
    if scenario.model.kind == "field_mode":
        return np.asarray(scenario.model.frequencies, dtype=float)
    raise StateError("ho_ground needs 'frequency' for particle models")


def _oscillator_masses(scenario: Scenario, dim: int) -> np.ndarray:
    if scenario.model.kind == "particle_schrodinger":
        return np.asarray(scenario.model.masses, dtype=float)
    if scenario.model.kind == "pauli":
        return np.full(dim, scenario.model.mass)
    return np.ones(dim)  # field quadratures are unit-mass oscillators


# ---------------------------------------------------------------------------
# Fock representation


def build_fock_state(scenario: Scenario):
    """Build the scenario's initial state as a FockWavefunction."""
    from .solver_fock import FockWavefunction

    domain = scenario.domain
    if not isinstance(domain, FockDomain):
        raise StateError("build_fock_state needs a Fock domain")
    if scenario.model.kind != "field_mode":
        raise StateError("Fock states require a field_mode model")
    n_max = tuple(int(n) for n in domain.n_max)
    F = scenario.model.internal_dim
    amp = _fock_amplitudes(scenario.initial_state, scenario, n_max, F)
    if amp.ndim == len(n_max):
        if F != 1:
            raise StateError("models with internal structure need a spinor (or superposition of spinors) initial state")
        amp = amp[..., np.newaxis]
    psi = FockWavefunction(
        frequencies=tuple(float(w) for w in scenario.model.frequencies),
        n_max=n_max,
        amplitudes=np.ascontiguousarray(amp),
        time=0.0,
    )
    psi.normalize()
    return psi


def _fock_amplitudes(spec: StateSpec, scenario: Scenario, n_max: tuple[int, ...], F: int) -> np.ndarray:
    spec = _as_state_spec(spec)
    params = spec.params
    if spec.family == "spinor":
        comps = np.asarray([_as_complex(c) for c in params.get("components", ())])
        if comps.shape != (F,):
            raise StateError(f"spinor components must have length {F}")
        spatial = _fock_scalar(_as_state_spec(params["spatial"]), scenario, n_max)
        return spatial[..., np.newaxis] * comps
    if spec.family == "superposition":
        total = None
        for coeff, sub in params.get("terms", ()):
            term = _as_complex(coeff) * _fock_amplitudes(_as_state_spec(sub), scenario, n_max, F)
            total = term if total is None else total + term
        if total is None:
            raise StateError("superposition needs at least one term")
        return total
    return _fock_scalar(spec, scenario, n_max)


def _fock_scalar(spec: StateSpec, scenario: Scenario, n_max: tuple[int, ...]) -> np.ndarray:
    M = len(n_max)
    params = spec.params

    if spec.family in ("ho_ground", "vacuum"):
        out = np.zeros([n + 1 for n in n_max], dtype=complex)
        out[(0,) * M] = 1.0
        return out

    if spec.family == "number_state":
        ns = params.get("n")
        ns = list(ns) if isinstance(ns, (list, tuple)) else [ns]
        if len(ns) != M:
            raise StateError(f"number_state needs one occupation per mode ({M})")
        for j, n in enumerate(ns):
            if not 0 <= int(n) <= n_max[j]:
                raise StateError(f"occupation {n} outside truncation for mode {j}")
        out = np.zeros([n + 1 for n in n_max], dtype=complex)
        out[tuple(int(n) for n in ns)] = 1.0
        return out

    if spec.family == "coherent":
        alphas = params.get("alpha")
        if alphas is None:
            raise StateError("coherent needs 'alpha'")
        alphas = [_as_complex(a) for a in (alphas if isinstance(alphas, (list, tuple)) else [alphas])]
        if len(alphas) != M:
            raise StateError(f"coherent needs one alpha per mode ({M})")
        factors = []
        for j, a in enumerate(alphas):
            n = np.arange(n_max[j] + 1)
            log_fact = np.cumsum(np.log(np.maximum(n, 1)))
            amp = np.exp(-abs(a) ** 2 / 2) * a**n / np.exp(log_fact / 2)
            factors.append(amp)
        out = factors[0]
        for f in factors[1:]:
            out = np.multiply.outer(out, f)
        return out.astype(complex)

    raise StateError(f"state family {spec.family!r} is not available in the Fock representation")
