import logging
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict

from latent_model.aggregate import AggregateSource, AggregateSpec
from latent_model.measurement import LatentState, linear_predictor, state_losses
from latent_model.trainer import FittedModel, blockwise_argmin, check_search_size, states_for, subjects_per_chunk
from latent_model.transition import forward_batch
from trial_data.schema import Dataset

logger = logging.getLogger(__name__)


class Recommendation(BaseModel):
    model_config = ConfigDict(frozen=True)

    z0_hat: tuple
    z1_soft_pos: tuple
    z1_soft_neg: tuple
    g_pos: float
    g_neg: float
    chosen_arm: int


def _baseline_chunk(model: FittedModel, Y0: np.ndarray) -> np.ndarray:
    return blockwise_argmin(lambda states: state_losses(model.measurement, states, Y0), Y0.shape[0], model.K)


def estimate_baseline_states(model: FittedModel, Y0, threads: int = 1) -> np.ndarray:
    """Hard Z0 for each row of Y0, minimizing the pre-treatment loss only."""
    Y0 = np.atleast_2d(model.prepare_items(Y0))
    check_search_size(model.K)
    if Y0.shape[0] == 0:
        return np.zeros((0, model.K))
    size = subjects_per_chunk(model.K)
    chunks = [slice(start, start + size) for start in range(0, Y0.shape[0], size)]
    codes = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_baseline_chunk)(model, Y0[rows]) for rows in chunks
    )
    return states_for(model.K, np.concatenate(codes))


def estimate_baseline_state(model: FittedModel, y0, x=None) -> LatentState:
    # x is accepted for symmetry with recommend; the criterion uses y0 only
    return LatentState(estimate_baseline_states(model, np.reshape(y0, (1, np.size(y0))))[0], mode="hard")


def potential_states(model: FittedModel, X, Z0) -> tuple:
    """Soft Z1 under +1 and under -1 for every row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=np.float64))
    n = X.shape[0]
    z1_pos, _ = forward_batch(model.transition, X, Z0, np.ones(n, dtype=np.int64))
    z1_neg, _ = forward_batch(model.transition, X, Z0, -np.ones(n, dtype=np.int64))
    return z1_pos, z1_neg


def choose_arms(g_pos: np.ndarray, g_neg: np.ndarray) -> np.ndarray:
    """argmax over arms; exact ties go to +1."""
    return np.where(g_pos >= g_neg, 1, -1)


def recommend_batch(
    model: FittedModel, Y0, X, aggregate: Optional[AggregateSpec] = None, threads: int = 1
) -> pd.DataFrame:
    aggregate = aggregate or model.aggregate
    Z0 = estimate_baseline_states(model, Y0, threads)
    z1_pos, z1_neg = potential_states(model, X, Z0)
    g_pos, g_neg = aggregate.evaluate(z1_pos), aggregate.evaluate(z1_neg)
    frame = pd.DataFrame({f"z0_hat_{k + 1}": Z0[:, k].astype(np.int64) for k in range(model.K)})
    frame["g_pos"] = g_pos
    frame["g_neg"] = g_neg
    frame["chosen_arm"] = choose_arms(g_pos, g_neg)
    return frame


def recommend(model: FittedModel, y0, x, aggregate: Optional[AggregateSpec] = None) -> Recommendation:
    aggregate = aggregate or model.aggregate
    z0 = estimate_baseline_state(model, y0, x)
    z1_pos, z1_neg = potential_states(model, np.reshape(x, (1, np.size(x))), z0.values.reshape(1, -1))
    g_pos = float(aggregate.evaluate(z1_pos)[0])
    g_neg = float(aggregate.evaluate(z1_neg)[0])
    return Recommendation(
        z0_hat=z0.as_tuple(),
        z1_soft_pos=tuple(z1_pos[0].tolist()),
        z1_soft_neg=tuple(z1_neg[0].tolist()),
        g_pos=g_pos,
        g_neg=g_neg,
        chosen_arm=int(choose_arms(np.array([g_pos]), np.array([g_neg]))[0]),
    )


def policy_for_dataset(model: FittedModel, ds: Dataset, aggregate: Optional[AggregateSpec] = None, threads: int = 1) -> np.ndarray:
    return recommend_batch(model, ds.y0, ds.x, aggregate, threads)["chosen_arm"].to_numpy()


def score_aggregate_from_model(model: FittedModel) -> AggregateSpec:
    return AggregateSource(kind="model_scores").resolve(model.measurement)


def item_prediction_accuracy(model: FittedModel, ds: Dataset, threads: int = 1) -> pd.DataFrame:
    """Fit of the decoded pre-treatment items under the estimated baseline states.

    Discrete items report the share of subjects whose most probable category
    equals the observed one; continuous items report the RMSE.
    """
    Y0 = np.atleast_2d(model.prepare_items(ds.y0))
    Z0 = estimate_baseline_states(model, ds.y0, threads)
    rows = []
    for j, item in enumerate(model.schema.items):
        eta = linear_predictor(model.measurement, Z0, j)
        if item.is_discrete:
            accuracy = float(np.mean(np.argmax(eta, axis=1) == Y0[:, j])) if ds.n else float("nan")
            rows.append({"item": item.name, "kind": item.kind, "accuracy": accuracy, "rmse": None})
        else:
            rmse = float(np.sqrt(np.mean((eta[:, 0] - Y0[:, j]) ** 2))) if ds.n else float("nan")
            rows.append({"item": item.name, "kind": item.kind, "accuracy": None, "rmse": rmse})
    return pd.DataFrame(rows)


def latent_recovery_accuracy(estimated, truth) -> float:
    """Share of (subject, domain) entries where the estimated state equals the true one."""
    estimated = np.atleast_2d(np.asarray(estimated))
    truth = np.atleast_2d(np.asarray(truth))
    return float(np.mean(estimated == truth))
