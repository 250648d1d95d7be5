import numpy as np
import pytest

from pilotwave.model import validate_scenario
from pilotwave.scenarios import (
    CHECKERS,
    ScenarioFormatError,
    apply_overrides,
    check_fixture,
    list_bundled,
    list_fixtures,
    load_fixture,
    load_scenario,
    load_scenario_text,
    scenario_from_dict,
    scenario_hash,
    scenario_to_dict,
)

EXPECTED_BUNDLED = {
    "coherent_field", "double_slit", "free_gaussian", "harmonic_ground",
    "node_crossing", "qed_toy_emission", "stern_gerlach_25_75",
    "stern_gerlach_50_50", "vacuum_field", "vacuum_pinned",
}


def test_bundled_inventory():
    assert set(list_bundled()) == EXPECTED_BUNDLED
    assert set(list_fixtures()) == EXPECTED_BUNDLED  # one fixture per scenario


def test_all_bundled_validate_clean():
    for name in list_bundled():
        assert validate_scenario(load_scenario(name)) == [], name


def test_fixture_checkers_exist():
    for name in list_fixtures():
        fx = load_fixture(name)
        for prop in fx.properties:
            assert prop.checker in CHECKERS


def test_scenario_dict_round_trip():
    for name in list_bundled():
        s = load_scenario(name)
        doc = scenario_to_dict(s)
        s2 = scenario_from_dict(doc)
        assert scenario_hash(scenario_to_dict(s2)) == scenario_hash(doc), name


def test_scenario_hash_sensitive_to_content():
    s = load_scenario("free_gaussian")
    h1 = scenario_hash(scenario_to_dict(s))
    h2 = scenario_hash(scenario_to_dict(s.with_overrides(dt=0.004)))
    assert h1 != h2


def test_unknown_key_named_in_error():
    with pytest.raises(ScenarioFormatError, match="mystery"):
        load_scenario_text(
            "name: x\nmodel: {kind: particle_schrodinger, masses: [1.0]}\n"
            "domain: {axes: [{name: x, min: -1.0, max: 1.0, points: 16}]}\n"
            "initial_state: {family: gaussian_packet, width: 0.1}\n"
            "integration: {dt: 0.01, t_final: 0.1}\nmystery: 0\n"
        )


def test_missing_required_key():
    with pytest.raises(ScenarioFormatError, match="initial_state"):
        load_scenario_text(
            "name: x\nmodel: {kind: particle_schrodinger, masses: [1.0]}\n"
            "domain: {axes: [{name: x, min: -1.0, max: 1.0, points: 16}]}\n"
            "integration: {dt: 0.01, t_final: 0.1}\n"
        )


def test_overrides_dotted_paths():
    doc = {"integration": {"dt": 0.01}, "ensemble": {"samples": 10}}
    out = apply_overrides(doc, ["integration.dt=0.5", "ensemble.samples=99"])
    assert out["integration"]["dt"] == 0.5
    assert out["ensemble"]["samples"] == 99
    assert doc["integration"]["dt"] == 0.01  # original untouched


def test_bad_override_rejected():
    with pytest.raises(ScenarioFormatError):
        apply_overrides({}, ["no_equals_sign"])


def test_complex_matrix_parsing():
    s = load_scenario_text(
        "name: x\n"
        "model:\n"
        "  kind: field_mode\n"
        "  frequencies: [1.0]\n"
        "  fermion_dim: 2\n"
        "  fermion_block: [[0.5, [0.0, 0.3]], [[0.0, -0.3], -0.5]]\n"
        "domain: {n_max: [8]}\n"
        "initial_state: {family: spinor, components: [1.0, 0.0], spatial: {family: ho_ground}}\n"
        "integration: {dt: 0.01, t_final: 0.1}\n"
    )
    block = np.asarray(s.model.fermion_block)
    assert block[0, 1] == complex(0.0, 0.3)
    assert validate_scenario(s) == []


def test_check_fixture_runs_against_run_dir(tmp_path):
    from pilotwave.cli import main

    out = tmp_path / "run"
    assert main(["run", "harmonic_ground", "-o", str(out),
                 "--override", "ensemble.samples=200",
                 "--override", "integration.t_final=1.0",
                 "--override", "ensemble.checkpoints=2"]) == 0
    results = check_fixture(load_fixture("harmonic_ground"), str(out))
    by_name = {r.name: r for r in results}
    assert by_name["stationary_trajectories"].passed
    assert by_name["norm_drift"].passed
    assert by_name["certification"].passed
