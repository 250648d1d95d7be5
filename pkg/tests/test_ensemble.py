import numpy as np
import pytest
from scipy import stats

from pilotwave.ensemble import (
    EnsembleError,
    FockDensity,
    GridDensity,
    ScenarioInvalid,
    bootstrap_noise_floor,
    equivariance_distance,
    metropolis_sample,
    run_ensemble,
    sample_equilibrium,
)
from pilotwave.model import (
    FieldModeHamiltonian,
    FockDomain,
    Scenario,
    StateSpec,
)
from pilotwave.scenarios import load_scenario
from pilotwave.states import build_fock_state


def _standard_normal_density(n=2001, span=8.0):
    x = np.linspace(-span, span, n)
    return GridDensity([x], np.exp(-x**2 / 2) / np.sqrt(2 * np.pi))


class TestSampling:
    def test_gaussian_moments(self):
        dens = _standard_normal_density()
        rng = np.random.Generator(np.random.Philox(1))
        n = 100_000
        samples = dens.sample(n, rng)[:, 0]
        assert abs(samples.mean()) < 4 / np.sqrt(n)
        assert abs(samples.var() - 1.0) < 0.05

    def test_two_branch_weights(self):
        x = np.linspace(-12, 12, 4001)
        rho = 0.3 * np.exp(-((x + 5) ** 2) / 2) + 0.7 * np.exp(-((x - 5) ** 2) / 2)
        dens = GridDensity([x], rho)
        rng = np.random.Generator(np.random.Philox(2))
        n = 20_000
        samples = dens.sample(n, rng)[:, 0]
        frac = np.mean(samples > 0)
        se = np.sqrt(0.7 * 0.3 / n)
        assert abs(frac - 0.7) <= 3 * se

    def test_vacuum_marginals_two_sample_ks(self):
        # oracle: analytic per-mode marginal of the 2-mode vacuum is the
        # ground-state density, i.e. a normal with std 1/sqrt(2 w)
        model = FieldModeHamiltonian(frequencies=(1.0, 2.0))
        s = Scenario(name="t", model=model, initial_state=StateSpec("ho_ground"),
                     domain=FockDomain((8, 8)), dt=0.01, t_final=1.0)
        psi = build_fock_state(s)
        samples = sample_equilibrium(psi, 4000, seed=11)
        ref_rng = np.random.Generator(np.random.Philox(12))
        for d, w in enumerate((1.0, 2.0)):
            ref = ref_rng.normal(scale=1 / np.sqrt(2 * w), size=4000)
            p = stats.ks_2samp(samples[:, d], ref).pvalue
            assert p > 0.01

    def test_metropolis_four_mode_vacuum(self):
        model = FieldModeHamiltonian(frequencies=(1.0, 1.0, 1.0, 1.0))
        s = Scenario(name="t", model=model, initial_state=StateSpec("ho_ground"),
                     domain=FockDomain((5, 5, 5, 5)), dt=0.01, t_final=1.0)
        psi = build_fock_state(s)
        dens = FockDensity(psi)
        rng = np.random.Generator(np.random.Philox(3))
        samples = dens.sample(3000, rng)
        assert dens.last_rhat < 1.05
        ref = np.random.Generator(np.random.Philox(4)).normal(
            scale=1 / np.sqrt(2), size=3000)
        for d in range(4):
            assert stats.ks_2samp(samples[:, d], ref).pvalue > 0.005

    def test_seed_determinism(self):
        dens = _standard_normal_density()
        a = dens.sample(500, np.random.Generator(np.random.Philox(9)))
        b = dens.sample(500, np.random.Generator(np.random.Philox(9)))
        assert np.array_equal(a, b)

    def test_metropolis_rhat_definition(self):
        rng = np.random.Generator(np.random.Philox(5))
        target = lambda x: np.exp(-0.5 * np.sum(x**2, axis=-1))
        samples, rhat = metropolis_sample(target, np.zeros(3), np.ones(3), 2000, rng)
        assert samples.shape == (2000, 3)
        assert rhat < 1.05


class TestEquivarianceDistance:
    def test_same_distribution_within_floor(self):
        dens = _standard_normal_density()
        rng = np.random.Generator(np.random.Philox(21))
        samples = dens.sample(10_000, rng)
        dist, meta = equivariance_distance(samples, dens)
        floor = bootstrap_noise_floor(dens, 10_000, rng)
        assert dist <= floor["floor"]
        assert meta["mode"] == "joint"

    def test_point_mass_maximal_distance(self):
        dens = _standard_normal_density()
        samples = np.full((5000, 1), 0.37)
        dist, _ = equivariance_distance(samples, dens)
        assert dist > 1.8  # one shared bin keeps it just below the exact 2

    def test_refuses_small_ensembles(self):
        dens = _standard_normal_density()
        with pytest.raises(EnsembleError):
            equivariance_distance(np.zeros((50, 1)), dens)

    def test_marginal_mode_above_2d(self):
        model = FieldModeHamiltonian(frequencies=(1.0, 1.0, 1.0))
        s = Scenario(name="t", model=model, initial_state=StateSpec("ho_ground"),
                     domain=FockDomain((5, 5, 5)), dt=0.01, t_final=1.0)
        dens = FockDensity(build_fock_state(s))
        rng = np.random.Generator(np.random.Philox(31))
        samples = dens.sample(1500, rng)
        dist, meta = equivariance_distance(samples, dens)
        assert meta["mode"] == "marginals"
        assert dist < 0.5


class TestRunEnsemble:
    def test_invalid_scenario_raises(self):
        s = load_scenario("free_gaussian").with_overrides(dt=-1.0)
        with pytest.raises(ScenarioInvalid):
            run_ensemble(s)

    def test_run_is_deterministic(self):
        s = load_scenario("free_gaussian")
        s = s.with_overrides(
            t_final=1.0,
            ensemble=s.ensemble.__class__(samples=300, seed=77, checkpoints=3),
        )
        a = run_ensemble(s)
        b = run_ensemble(s)
        assert np.array_equal(a.batch.positions, b.batch.positions)
        assert a.report == b.report

    def test_report_structure(self):
        s = load_scenario("free_gaussian")
        s = s.with_overrides(
            t_final=1.0,
            ensemble=s.ensemble.__class__(samples=300, seed=5, checkpoints=3),
        )
        r = run_ensemble(s)
        assert r.report["certification"] in ("certified", "diagnostics")
        assert len(r.report["checkpoints"]) == 3
        for ck in r.report["checkpoints"]:
            assert ck["distance"] is not None
            assert ck["noise_floor"] > 0
        assert r.final_state is not None

    def test_nonequilibrium_point_start_maximal_distance(self):
        s = load_scenario("free_gaussian")
        s = s.with_overrides(
            t_final=0.5,
            ensemble=s.ensemble.__class__(
                samples=5000, seed=5, checkpoints=2,
                initial_distribution="point", point=(0.5,),
            ),
        )
        r = run_ensemble(s)
        # one shared bin carries a little density mass, hence not exactly 2
        assert r.report["checkpoints"][0]["distance"] > 1.75

    def test_small_ensemble_skips_distance(self):
        s = load_scenario("free_gaussian")
        s = s.with_overrides(
            t_final=0.5,
            ensemble=s.ensemble.__class__(samples=8, seed=5, checkpoints=2),
        )
        r = run_ensemble(s)
        assert all(ck["distance"] is None for ck in r.report["checkpoints"])
