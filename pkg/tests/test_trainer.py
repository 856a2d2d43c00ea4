import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import random_dataset, random_theta
from errors import DataValidationError, LatentSearchError, NonFiniteGradientError, TrainingError
from latent_model.measurement import MeasurementParams
from latent_model.objective import ModelParams, objective_and_gradient, subject_losses, total_objective
from latent_model.trainer import (
    AdamOptimizer,
    TrainingConfig,
    adam_epoch,
    all_states,
    apply_anchor_constraints,
    blockwise_argmin,
    default_batch_size,
    exact_latent_search,
    fit,
    initialize_parameters,
    iteration_learning_rate,
    latent_sweep,
    resolve_anchors,
    subjects_per_chunk,
)
from latent_model.transition import TransitionParams
from trial_data.schema import Anchor, Dataset, ItemSchema, ItemSpec


def continuous_dataset(y0, y1, propensity, treatment):
    schema = ItemSchema(items=[ItemSpec(name="score", kind="continuous")])
    n = len(treatment)
    return Dataset(
        schema=schema,
        covariate_names=(),
        y0=np.reshape(y0, (n, 1)),
        x=np.zeros((n, 0)),
        treatment=treatment,
        propensity=propensity,
        y1=np.reshape(y1, (n, 1)),
    )


def zero_theta(schema, K, P, hidden=(2,)):
    return ModelParams(MeasurementParams.zeros(schema, K), TransitionParams.zeros(P, K, list(hidden)))


def brute_force_state(theta, ds, i):
    best, best_loss = None, np.inf
    for state in itertools.product((0.0, 1.0), repeat=theta.K):
        z0 = np.array([state])
        pre, post = subject_losses(
            theta, z0, ds.x[i:i + 1], ds.treatment[i:i + 1], ds.y0[i:i + 1], ds.y1[i:i + 1]
        )
        loss = pre[0] + post[0]
        if loss < best_loss:
            best, best_loss = state, loss
    return best


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainingConfig(K=0)
    with pytest.raises(ValidationError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        TrainingConfig(hidden=[4, 0])
    with pytest.raises(ValidationError):
        TrainingConfig(learning_rate_decay=0.0)
    with pytest.raises(ValidationError):
        TrainingConfig(learning_rate_decay=1.5)
    with pytest.raises(ValidationError):
        TrainingConfig(K=2, anchors=[Anchor(domain=0, item=0), Anchor(domain=0, item=1)])
    with pytest.raises(ValidationError):
        TrainingConfig(K=2, anchors=[Anchor(domain=0, item="a"), Anchor(domain=1, item="a")])
    assert TrainingConfig(outer_iterations=0).outer_iterations == 0


def test_total_objective_single_subject():
    # zero parameters predict 0 for the item and 0.5 for the soft state
    ds = continuous_dataset([1.0], [np.sqrt(2.0)], [0.5], [1])
    theta = zero_theta(ds.schema, K=1, P=0)
    assert total_objective(theta, [[0.0]], ds) == pytest.approx(6.0)


def test_total_objective_is_linear_in_weights(small_dataset, rng):
    theta = random_theta(small_dataset.schema, 2, 2, [4], rng)
    latents = rng.integers(0, 2, size=(small_dataset.n, 2))
    base = total_objective(theta, latents, small_dataset)
    halved = Dataset(
        schema=small_dataset.schema,
        covariate_names=small_dataset.covariate_names,
        y0=small_dataset.y0,
        x=small_dataset.x,
        treatment=small_dataset.treatment,
        propensity=small_dataset.propensity / 2.0,
        y1=small_dataset.y1,
    )
    assert total_objective(theta, latents, halved) == pytest.approx(2.0 * base)
    assert base > 0.0


def test_zero_parameters_search_returns_all_zero_state(small_dataset):
    theta = zero_theta(small_dataset.schema, K=3, P=2)
    for i in range(3):
        assert exact_latent_search(theta, small_dataset, i).as_tuple() == (0, 0, 0)
    assert not latent_sweep(theta, small_dataset).any()


def test_strongly_loaded_item_selects_its_domain():
    schema = ItemSchema(items=[ItemSpec(name="mood", kind="discrete", num_categories=3)])
    ds = Dataset(
        schema=schema,
        covariate_names=(),
        y0=[[2.0]],
        x=np.zeros((1, 0)),
        treatment=[1],
        propensity=[0.5],
        y1=[[1.0]],
    )
    theta = zero_theta(schema, K=2, P=0)
    theta.measurement.beta[0][1] = [-4.0, 0.0, 4.0]
    state = exact_latent_search(theta, ds, 0)
    assert state.values[1] == 1.0
    assert state.as_tuple() == brute_force_state(theta, ds, 0)


def test_search_matches_brute_force(small_schema):
    rng = np.random.default_rng(17)
    for _ in range(20):
        ds = random_dataset(small_schema, 6, 2, rng)
        theta = random_theta(small_schema, 3, 2, [5], rng, scale=1.5)
        sweep = latent_sweep(theta, ds)
        for i in range(ds.n):
            expected = brute_force_state(theta, ds, i)
            assert exact_latent_search(theta, ds, i).as_tuple() == expected
            assert tuple(sweep[i].astype(int)) == expected


def test_sweep_is_thread_independent(small_schema):
    rng = np.random.default_rng(8)
    ds = random_dataset(small_schema, 600, 2, rng)
    theta = random_theta(small_schema, 3, 2, [5], rng)
    np.testing.assert_array_equal(latent_sweep(theta, ds, threads=1), latent_sweep(theta, ds, threads=4))


def test_sweep_handles_sixteen_domains(small_schema):
    rng = np.random.default_rng(16)
    ds = random_dataset(small_schema, 3, 2, rng)
    theta = random_theta(small_schema, 16, 2, [3], rng)
    states = all_states(16)
    sweep = latent_sweep(theta, ds, threads=2)
    assert sweep.shape == (3, 16)
    for i in range(ds.n):
        rows = np.full(states.shape[0], i)
        pre, post = subject_losses(theta, states, ds.x[rows], ds.treatment[rows], ds.y0[rows], ds.y1[rows])
        np.testing.assert_array_equal(sweep[i], states[np.argmin(pre + post)])
    assert exact_latent_search(theta, ds, 0).as_tuple() == tuple(sweep[0].astype(int))


def test_state_blocks_give_the_same_sweep(small_schema, monkeypatch):
    rng = np.random.default_rng(23)
    ds = random_dataset(small_schema, 9, 2, rng)
    theta = random_theta(small_schema, 4, 2, [3], rng)
    expected = latent_sweep(theta, ds)
    monkeypatch.setattr("latent_model.trainer.ROW_BUDGET", 5)
    assert subjects_per_chunk(4) == 1
    np.testing.assert_array_equal(latent_sweep(theta, ds, threads=3), expected)
    assert not latent_sweep(zero_theta(small_schema, K=4, P=2), ds).any()


def test_blockwise_argmin_keeps_the_first_minimum(monkeypatch):
    monkeypatch.setattr("latent_model.trainer.ROW_BUDGET", 3)
    table = np.array([[3.0, 1.0, 2.0, 1.0, 0.5, 0.5, 4.0, 9.0], [1.0] * 8])

    def losses_for(states):
        codes = (states @ np.array([4.0, 2.0, 1.0])).astype(int)
        return table[:, codes]

    np.testing.assert_array_equal(blockwise_argmin(losses_for, 2, 3), [4, 0])


def test_search_guard_on_large_K(small_dataset):
    assert all_states(3).shape == (8, 3)
    np.testing.assert_array_equal(all_states(2), [[0, 0], [0, 1], [1, 0], [1, 1]])
    with pytest.raises(LatentSearchError):
        all_states(21)
    theta = zero_theta(small_dataset.schema, K=21, P=2)
    with pytest.raises(LatentSearchError):
        exact_latent_search(theta, small_dataset, 0)


@pytest.mark.parametrize("n, expected", [(200, 50), (500, 150), (1000, 250), (2000, 500), (40, 40), (10000, 500)])
def test_default_batch_size(n, expected):
    assert default_batch_size(n) == expected


def test_resolve_anchors_from_metadata_and_fallback(simulated, small_dataset):
    dataset, _ = simulated
    anchors = resolve_anchors(TrainingConfig(K=3), dataset)
    assert [(a.domain, a.item, a.direction) for a in anchors] == [(0, 0, "+"), (1, 1, "+"), (2, 2, "+")]

    fallback = resolve_anchors(TrainingConfig(K=2), small_dataset)
    assert [a.item for a in fallback] == small_dataset.schema.discrete_indices[:2]
    with pytest.raises(TrainingError):
        resolve_anchors(TrainingConfig(K=3), small_dataset)

    named = TrainingConfig(K=1, anchors=[Anchor(domain=0, item="sleep", direction="-")])
    assert resolve_anchors(named, small_dataset)[0].item == 1


def test_anchor_projection_is_monotone(small_schema):
    params = MeasurementParams.zeros(small_schema, 2)
    params.beta[0][0] = [1.0, -2.0, 0.5]
    params.beta[1][1] = [3.0, -1.0]
    params.beta[2][0] = [-0.7]
    anchors = [Anchor(domain=0, item=0, direction="+"), Anchor(domain=1, item=1, direction="-")]
    apply_anchor_constraints(params, anchors)
    assert np.all(np.diff(params.beta[0][0]) >= 0)
    assert np.all(np.diff(params.beta[1][1]) <= 0)
    np.testing.assert_array_equal(params.beta[1][1], [3.0, -1.0])

    continuous = [Anchor(domain=0, item=2, direction="+")]
    apply_anchor_constraints(params, continuous)
    assert params.beta[2][0, 0] == 0.0


def test_zero_learning_rate_leaves_theta_unchanged(small_dataset):
    config = TrainingConfig(K=2, hidden=[4], seed=3).model_copy(update={"learning_rate": 0.0})
    anchors = resolve_anchors(config, small_dataset)
    theta = initialize_parameters(small_dataset, config, anchors)
    before = {name: array.copy() for name, array in theta.named_arrays().items()}
    latents = latent_sweep(theta, small_dataset)
    adam_epoch(theta, AdamOptimizer(theta.named_arrays(), config), latents, small_dataset, config, 0, anchors)
    for name, array in theta.named_arrays().items():
        np.testing.assert_allclose(array, before[name], rtol=0, atol=1e-15)


def test_full_batch_epoch_is_one_adam_step(small_dataset):
    config = TrainingConfig(K=2, hidden=[4], seed=3, batch_size=small_dataset.n, learning_rate=0.05)
    anchors = resolve_anchors(config, small_dataset)
    theta = initialize_parameters(small_dataset, config, anchors)
    latents = latent_sweep(theta, small_dataset)

    expected = theta.copy()
    ds = small_dataset
    _, tape = objective_and_gradient(expected, latents, ds.x, ds.treatment, ds.y0, ds.y1, ds.weights)
    for name, array in expected.named_arrays().items():
        g = tape[name]
        array -= config.learning_rate * g / (np.abs(g) + config.adam_epsilon)
    apply_anchor_constraints(expected.measurement, anchors)

    adam_epoch(theta, AdamOptimizer(theta.named_arrays(), config), latents, ds, config, 0, anchors)
    for name, array in theta.named_arrays().items():
        np.testing.assert_allclose(array, expected.named_arrays()[name], rtol=1e-9, atol=1e-10)


def test_non_finite_gradient_names_the_block(small_dataset):
    y0 = np.array(small_dataset.y0)
    y0[0, 2] = 1e308
    ds = small_dataset.with_items(y0, small_dataset.y1)
    config = TrainingConfig(K=2, hidden=[3])
    theta = zero_theta(ds.schema, K=2, P=2, hidden=(3,))
    anchors = resolve_anchors(config, ds)
    with pytest.raises(NonFiniteGradientError) as excinfo:
        adam_epoch(theta, AdamOptimizer(theta.named_arrays(), config), np.zeros((ds.n, 2)), ds, config, 0, anchors)
    assert excinfo.value.block == "alpha:score"


def test_fit_needs_both_arms(small_schema):
    rng = np.random.default_rng(2)
    ds = random_dataset(small_schema, 10, 2, rng)
    one_arm = ds.subset(np.flatnonzero(ds.treatment == 1))
    with pytest.raises(DataValidationError):
        fit(one_arm, TrainingConfig(K=1, hidden=[3], outer_iterations=1, epochs_per_iteration=1))


def test_zero_outer_iterations_keeps_initialization(simulated):
    dataset, _ = simulated
    config = TrainingConfig(hidden=[4], outer_iterations=0, seed=9)
    model = fit(dataset, config)
    assert [record.phase for record in model.objective_log] == ["init"]
    theta = initialize_parameters(dataset, config, resolve_anchors(config, dataset))
    for name, array in theta.named_arrays().items():
        np.testing.assert_array_equal(model.theta.named_arrays()[name], array)
    np.testing.assert_array_equal(model.training_latents, latent_sweep(theta, dataset))


def test_fit_is_deterministic_and_thread_independent(simulated, quick_config, fitted_model):
    dataset, _ = simulated
    again = fit(dataset, quick_config, threads=4)
    assert again.objective_log == fitted_model.objective_log
    for name, array in fitted_model.theta.named_arrays().items():
        np.testing.assert_array_equal(again.theta.named_arrays()[name], array)
    np.testing.assert_array_equal(again.training_latents, fitted_model.training_latents)


def test_different_seeds_give_different_models(simulated, quick_config, fitted_model):
    dataset, _ = simulated
    other = fit(dataset, quick_config.model_copy(update={"seed": quick_config.seed + 1}))
    assert not np.array_equal(other.transition.shared[0].weight, fitted_model.transition.shared[0].weight)


def test_objective_log_and_anchors(fitted_model, quick_config):
    log = fitted_model.objective_log
    assert [r.phase for r in log] == ["init", "adam", "search", "adam", "search"]
    assert all(np.isfinite(r.objective) for r in log)
    for adam, search in zip(log[1::2], log[2::2]):
        assert adam.iteration == search.iteration
        assert search.objective <= adam.objective + 1e-9 * max(1.0, abs(adam.objective))
        assert 0 <= search.changed <= 160
    for anchor in fitted_model.anchors:
        row = fitted_model.measurement.beta[anchor.item][anchor.domain]
        steps = np.diff(row)
        assert np.all(steps >= 0) if anchor.direction == "+" else np.all(steps <= 0)
    assert fitted_model.config.anchors == fitted_model.anchors
    assert fitted_model.aggregate.weights == [1.0] * quick_config.K


def test_standardized_fit_stores_scaler(simulated):
    dataset, _ = simulated
    config = TrainingConfig(hidden=[4], outer_iterations=1, epochs_per_iteration=1, standardize_continuous=True)
    model = fit(dataset, config)
    assert set(model.scaler.mean) == {item.name for item in dataset.schema.items if not item.is_discrete}
    assert model.prepare_items(dataset.y0).shape == dataset.y0.shape


def test_learning_rate_decays_per_outer_iteration():
    config = TrainingConfig(learning_rate=0.1, learning_rate_decay=0.5)
    assert [iteration_learning_rate(config, i) for i in (1, 2, 3)] == pytest.approx([0.1, 0.05, 0.025])
    assert iteration_learning_rate(TrainingConfig(learning_rate_decay=1.0), 6) == pytest.approx(0.1)


def test_fit_reports_each_sweep(simulated, quick_config, fitted_model):
    dataset, _ = simulated
    seen = []
    fit(dataset, quick_config, on_iteration=seen.append)
    assert seen == [record for record in fitted_model.objective_log if record.phase == "search"]
