import numpy as np
import pytest
from pydantic import ValidationError

from errors import DataValidationError, UnknownOutcomeError
from policy_evaluation.value import optimal_accuracy
from trial_simulator.simulator import (
    SimConfig,
    indicative_items,
    load_truth,
    oracle_outcomes,
    optimal_arms,
    oracle_value,
    primary_loadings,
    save_truth,
    simulate,
    simulation_schema,
    simulation_schema_file,
)


def test_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(propensity=1.5)
    with pytest.raises(ValidationError):
        SimConfig(n=0)
    with pytest.raises(ValidationError):
        SimConfig(K=4, n_discrete=3)
    with pytest.raises(ValidationError):
        SimConfig(n_discrete=0, n_continuous=0, K=0)


def test_default_layout():
    config = SimConfig()
    schema, covariates = simulation_schema(config)
    assert schema.names == [f"d{j}" for j in range(1, 10)] + [f"c{c}" for c in range(1, 6)]
    assert all(item.num_categories == 3 for item in schema.items[:9])
    assert covariates == ["x1", "x2", "x3"]
    assert indicative_items(config, schema) == ["d1", "d2", "d3", "c1", "c2"]
    anchors = simulation_schema_file(config).anchors
    assert [(a.domain, a.item) for a in anchors] == [(0, "d1"), (1, "d2"), (2, "d3")]


def test_simulation_is_deterministic():
    config = SimConfig(n=50, seed=4, dgp_seed=2)
    first, truth_a = simulate(config)
    second, truth_b = simulate(config)
    assert first.equals(second)
    np.testing.assert_array_equal(truth_a.z0, truth_b.z0)
    np.testing.assert_array_equal(truth_a.y1_neg, truth_b.y1_neg)

    other, _ = simulate(config.model_copy(update={"seed": 5}))
    assert not other.equals(first)
    _, other_truth = simulate(config.model_copy(update={"seed": 5}))
    assert other_truth.transition == truth_a.transition


def test_generated_values_respect_ranges(simulated):
    dataset, truth = simulated
    for j in dataset.schema.discrete_indices:
        for values in (dataset.y0[:, j], dataset.y1[:, j], truth.y1_pos[:, j], truth.y1_neg[:, j]):
            assert set(np.unique(values)) <= {0.0, 1.0, 2.0}
    assert set(np.unique(truth.z0)) <= {0, 1}
    np.testing.assert_array_equal(dataset.propensity, np.full(dataset.n, 0.5))
    assert dataset.arm_counts()[1] > 0 and dataset.arm_counts()[-1] > 0
    realized = np.where((dataset.treatment == 1)[:, None], truth.y1_pos, truth.y1_neg)
    np.testing.assert_array_equal(dataset.y1, realized)


def test_propensity_column_follows_the_arm():
    dataset, _ = simulate(SimConfig(n=200, propensity=0.3, seed=1))
    expected = np.where(dataset.treatment == 1, 0.3, 0.7)
    np.testing.assert_allclose(dataset.propensity, expected)


def test_optimal_policy_beats_fixed_policies(simulated):
    _, truth = simulated
    optimal = oracle_value(truth, truth.optimal_arm)
    for arm in (1, -1):
        assert optimal <= oracle_value(truth, np.full(truth.n, arm)) + 1e-12
    assert optimal <= oracle_value(truth, -truth.optimal_arm)
    per_subject = oracle_outcomes(truth, truth.optimal_arm)
    both = np.minimum(truth.p1_pos.sum(axis=1), truth.p1_neg.sum(axis=1))
    np.testing.assert_allclose(per_subject, both)


def test_no_treatment_effect_leaves_the_optimal_arm_to_a_coin():
    config = SimConfig(n=400, effect_scale=0.0, seed=2)
    _, truth = simulate(config)
    np.testing.assert_array_equal(truth.p1_pos, truth.p1_neg)
    assert 0.4 < np.mean(truth.optimal_arm == 1) < 0.6
    assert 0.4 < optimal_accuracy(np.ones(truth.n), truth.optimal_arm) < 0.6
    assert 0.4 < optimal_accuracy(-np.ones(truth.n), truth.optimal_arm) < 0.6
    _, again = simulate(config)
    np.testing.assert_array_equal(again.optimal_arm, truth.optimal_arm)


def test_optimal_arms_break_only_exact_ties():
    p1_pos = np.array([[0.1, 0.2], [0.6, 0.6], [0.3, 0.3]])
    p1_neg = np.array([[0.2, 0.2], [0.5, 0.6], [0.3, 0.3]])
    arms = [optimal_arms(p1_pos, p1_neg, np.random.default_rng(seed))[:2] for seed in range(5)]
    assert all(list(a) == [1, -1] for a in arms)
    ties = np.array([optimal_arms(p1_pos, p1_neg, np.random.default_rng(seed))[2] for seed in range(40)])
    assert set(ties) == {1, -1}


def test_optimal_policy_beats_random_policies(simulated):
    _, truth = simulated
    rng = np.random.default_rng(100)
    optimal = oracle_value(truth, truth.optimal_arm)
    for _ in range(100):
        policy = np.where(rng.random(truth.n) < rng.random(), 1, -1)
        assert optimal <= oracle_value(truth, policy) + 1e-12


def test_oracle_item_outcomes(simulated):
    _, truth = simulated
    policy = truth.optimal_arm
    subset = oracle_outcomes(truth, policy, "item_subset")
    chosen = np.where((policy == 1)[:, None], truth.y1_pos, truth.y1_neg)
    np.testing.assert_allclose(subset, chosen[:, [0, 1, 2, 9, 10]].sum(axis=1))
    np.testing.assert_allclose(oracle_outcomes(truth, policy, "item_sum"), chosen.sum(axis=1))
    np.testing.assert_allclose(oracle_outcomes(truth, policy, "item_subset", ["d4"]), chosen[:, 3])
    with pytest.raises(UnknownOutcomeError):
        oracle_value(truth, policy, "quality_of_life")


def test_primary_loadings_are_positive_trends(simulated):
    _, truth = simulated
    pairs = primary_loadings(truth)
    assert len(pairs) == 14
    assert all(trend > 0 for _, _, trend in pairs)
    assert pairs[0][:2] == ("d1", 0)
    assert pairs[3][:2] == ("d4", 0)
    assert pairs[9][:2] == ("c1", 0)


def test_truth_round_trip(tmp_path, simulated):
    _, truth = simulated
    path = tmp_path / "sim.truth.json"
    save_truth(truth, path, provenance={"command": "simulate"})
    restored = load_truth(path)
    for name in ("z0", "z1_pos", "z1_neg", "p1_pos", "p1_neg", "y1_pos", "y1_neg", "optimal_arm"):
        np.testing.assert_array_equal(getattr(restored, name), getattr(truth, name))
    assert restored.config == truth.config
    assert restored.transition == truth.transition


def test_load_truth_errors(tmp_path):
    with pytest.raises(DataValidationError):
        load_truth(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    with pytest.raises(DataValidationError):
        load_truth(bad)
    bad.write_text('{"z0": []}')
    with pytest.raises(DataValidationError):
        load_truth(bad)
