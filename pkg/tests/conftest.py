import numpy as np
import pytest

from latent_model.measurement import MeasurementParams
from latent_model.objective import ModelParams
from latent_model.trainer import TrainingConfig, fit
from latent_model.transition import TransitionParams
from trial_data.schema import Dataset, ItemSchema, ItemSpec
from trial_simulator.simulator import SimConfig, simulate


@pytest.fixture(autouse=True)
def _no_log_file(monkeypatch):
    monkeypatch.setenv("LATENTITR_LOG_FILE", "")


@pytest.fixture
def small_schema():
    return ItemSchema(
        items=[
            ItemSpec(name="mood", kind="discrete", num_categories=3),
            ItemSpec(name="sleep", kind="discrete", num_categories=2),
            ItemSpec(name="score", kind="continuous"),
        ]
    )


def random_dataset(schema: ItemSchema, n: int, P: int, rng: np.random.Generator) -> Dataset:
    def items():
        columns = [
            rng.integers(0, item.width, size=n).astype(np.float64) if item.is_discrete else rng.normal(size=n)
            for item in schema.items
        ]
        return np.column_stack(columns) if columns else np.zeros((n, 0))

    treatment = np.where(np.arange(n) % 2 == 0, 1, -1)
    rng.shuffle(treatment)
    return Dataset(
        schema=schema,
        covariate_names=tuple(f"x{p + 1}" for p in range(P)),
        y0=items(),
        x=rng.normal(size=(n, P)),
        treatment=treatment,
        propensity=rng.uniform(0.2, 0.8, size=n),
        y1=items(),
    )


def random_theta(schema: ItemSchema, K: int, P: int, hidden, rng: np.random.Generator, scale: float = 1.0) -> ModelParams:
    measurement = MeasurementParams.zeros(schema, K)
    for j, item in enumerate(schema.items):
        measurement.alpha[j][:] = rng.normal(0.0, scale, size=item.width)
        measurement.beta[j][:] = rng.normal(0.0, scale, size=(K, item.width))
    transition = TransitionParams.initialize(P, K, hidden, rng)
    for layer in [*transition.shared, transition.head_pos, transition.head_neg]:
        layer.bias[:] = rng.normal(0.0, 0.5, size=layer.bias.shape)
    return ModelParams(measurement, transition)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_dataset(small_schema, rng):
    return random_dataset(small_schema, 40, 2, rng)


@pytest.fixture(scope="session")
def simulated():
    return simulate(SimConfig(n=160, seed=3, dgp_seed=11))


@pytest.fixture(scope="session")
def quick_config():
    return TrainingConfig(hidden=[6], epochs_per_iteration=2, outer_iterations=2, seed=5)


@pytest.fixture(scope="session")
def fitted_model(simulated, quick_config):
    dataset, _ = simulated
    return fit(dataset, quick_config)
