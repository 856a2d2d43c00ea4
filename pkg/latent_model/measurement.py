"""Decoder from latent states to item distributions, shared by both phases.

Discrete item j with categories 0..l_j:
    P(Y_j = m | z) = softmax_m(alpha_jm + sum_k beta_jkm z_k)
Continuous item j:
    E[Y_j | z] = alpha_j + sum_k beta_jk z_k

Every item keeps an `alpha` of shape (width,) and a `beta` of shape (K, width),
with width 1 for continuous items, so both kinds share the linear predictor.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, NamedTuple, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from errors import SchemaError
from trial_data.schema import Dataset, ItemSchema

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
LOG_PROBABILITY_FLOOR = np.log(PROBABILITY_FLOOR)


@dataclass(frozen=True, eq=False)
class LatentState:
    values: np.ndarray
    mode: Literal["hard", "soft"] = "hard"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size < 1:
            raise ValueError("a latent state needs K >= 1 components")
        if self.mode == "hard" and not np.all((values == 0.0) | (values == 1.0)):
            raise ValueError(f"hard latent state must be binary, got {values}")
        if self.mode == "soft" and not np.all((values >= 0.0) & (values <= 1.0)):
            raise ValueError(f"soft latent state must lie in [0, 1], got {values}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def K(self) -> int:
        return int(self.values.size)

    def as_tuple(self) -> tuple:
        return tuple(int(v) for v in self.values) if self.mode == "hard" else tuple(self.values.tolist())


class ItemPrediction(NamedTuple):
    kind: Literal["discrete", "continuous"]
    probabilities: Optional[np.ndarray] = None
    mean: Optional[float] = None


def _as_matrix(z) -> np.ndarray:
    if isinstance(z, LatentState):
        z = z.values
    return np.atleast_2d(np.asarray(z, dtype=np.float64))


@dataclass
class MeasurementParams:
    schema: ItemSchema
    K: int
    alpha: List[np.ndarray]
    beta: List[np.ndarray]

    def __post_init__(self):
        if len(self.alpha) != len(self.schema) or len(self.beta) != len(self.schema):
            raise SchemaError("measurement parameters do not match the item schema")
        for item, a, b in zip(self.schema.items, self.alpha, self.beta):
            if a.shape != (item.width,) or b.shape != (self.K, item.width):
                raise SchemaError(
                    f"item '{item.name}' expects alpha {(item.width,)} and beta {(self.K, item.width)}, "
                    f"got {a.shape} and {b.shape}"
                )

    @classmethod
    def zeros(cls, schema: ItemSchema, K: int) -> "MeasurementParams":
        return cls(
            schema=schema,
            K=K,
            alpha=[np.zeros(item.width) for item in schema.items],
            beta=[np.zeros((K, item.width)) for item in schema.items],
        )

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for item, a, b in zip(self.schema.items, self.alpha, self.beta):
            arrays[f"alpha:{item.name}"] = a
            arrays[f"beta:{item.name}"] = b
        return arrays

    def copy(self) -> "MeasurementParams":
        return MeasurementParams(
            schema=self.schema,
            K=self.K,
            alpha=[a.copy() for a in self.alpha],
            beta=[b.copy() for b in self.beta],
        )

    def to_payload(self) -> List[dict]:
        payload = []
        for item, a, b in zip(self.schema.items, self.alpha, self.beta):
            if item.is_discrete:
                payload.append({"item": item.name, "alpha": a.tolist(), "beta": b.tolist()})
            else:
                payload.append({"item": item.name, "alpha": float(a[0]), "beta": b[:, 0].tolist()})
        return payload

    @classmethod
    def from_payload(cls, schema: ItemSchema, K: int, payload: List[dict]) -> "MeasurementParams":
        by_name = {entry["item"]: entry for entry in payload}
        alpha, beta = [], []
        for item in schema.items:
            if item.name not in by_name:
                raise SchemaError(f"no measurement parameters stored for item '{item.name}'")
            entry = by_name[item.name]
            alpha.append(np.asarray(entry["alpha"], dtype=np.float64).reshape(item.width))
            beta.append(np.asarray(entry["beta"], dtype=np.float64).reshape(K, item.width))
        return cls(schema=schema, K=K, alpha=alpha, beta=beta)


def linear_predictor(params: MeasurementParams, z, j: int) -> np.ndarray:
    """Linear predictor for item j, shape (n, width)."""
    return params.alpha[j] + _as_matrix(z) @ params.beta[j]


def decode_item(params: MeasurementParams, z, j: int) -> ItemPrediction:
    eta = linear_predictor(params, z, j)[0]
    if params.schema.items[j].is_discrete:
        return ItemPrediction(kind="discrete", probabilities=softmax(eta))
    return ItemPrediction(kind="continuous", mean=float(eta[0]))


def item_losses(params: MeasurementParams, Z, j: int, y) -> np.ndarray:
    """Per-row loss for item j: clamped cross entropy or squared error."""
    eta = linear_predictor(params, Z, j)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if params.schema.items[j].is_discrete:
        log_p = log_softmax(eta, axis=1)
        picked = log_p[np.arange(eta.shape[0]), y.astype(np.int64)]
        return -np.maximum(picked, LOG_PROBABILITY_FLOOR)
    return (y - eta[:, 0]) ** 2


def item_loss(params: MeasurementParams, z, j: int, y: float) -> float:
    return float(item_losses(params, z, j, [y])[0])


def measurement_losses(params: MeasurementParams, Z, Y) -> np.ndarray:
    """Sum of item losses for each row of Z against the matching row of Y."""
    Z = _as_matrix(Z)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    total = np.zeros(Z.shape[0])
    for j in range(len(params.schema)):
        total += item_losses(params, Z, j, Y[:, j])
    return total


def subject_measurement_loss(params: MeasurementParams, z, y) -> float:
    if len(params.schema) == 0:
        return 0.0
    return float(measurement_losses(params, z, np.asarray(y, dtype=np.float64).reshape(1, -1))[0])


def state_losses(params: MeasurementParams, states: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Loss of every candidate state for every subject, shape (n, n_states).

    The decoder is evaluated once per state and indexed by each subject's
    observed category, which keeps exhaustive search linear in n.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    losses = np.zeros((Y.shape[0], states.shape[0]))
    for j, item in enumerate(params.schema.items):
        eta = linear_predictor(params, states, j)
        if item.is_discrete:
            log_p = np.maximum(log_softmax(eta, axis=1), LOG_PROBABILITY_FLOOR)
            losses -= log_p[:, Y[:, j].astype(np.int64)].T
        else:
            losses += (Y[:, j][:, None] - eta[:, 0][None, :]) ** 2
    return losses


def measurement_backward(params: MeasurementParams, Z, Y, row_weights) -> tuple:
    """Gradients of sum_i row_weights_i * loss_i.

    Returns a name -> array dict for the decoder parameters and the gradient
    with respect to Z (used to continue into the transition network).
    """
    Z = _as_matrix(Z)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    w = np.asarray(row_weights, dtype=np.float64).reshape(-1, 1)
    grads: Dict[str, np.ndarray] = {}
    grad_z = np.zeros_like(Z)
    for j, item in enumerate(params.schema.items):
        eta = linear_predictor(params, Z, j)
        if item.is_discrete:
            log_p = log_softmax(eta, axis=1)
            y = Y[:, j].astype(np.int64)
            rows = np.arange(eta.shape[0])
            delta = np.exp(log_p)
            delta[rows, y] -= 1.0
            # clamped rows have a constant loss
            delta[log_p[rows, y] < LOG_PROBABILITY_FLOOR] = 0.0
        else:
            delta = 2.0 * (eta - Y[:, j][:, None])
        delta *= w
        grads[f"alpha:{item.name}"] = delta.sum(axis=0)
        grads[f"beta:{item.name}"] = Z.T @ delta
        grad_z += delta @ params.beta[j].T
    return grads, grad_z


def domain_scores(params: MeasurementParams) -> np.ndarray:
    """Per-domain (decreasing - increasing) share of adjacent discrete loading pairs."""
    discrete = params.schema.discrete_indices
    if not discrete:
        raise SchemaError("domain scores need at least one discrete item")
    scores = np.zeros(params.K)
    for k in range(params.K):
        steps = np.concatenate([np.diff(params.beta[j][k]) for j in discrete])
        scores[k] = (np.sum(steps < 0) - np.sum(steps > 0)) / steps.size
    return scores


@dataclass
class ContinuousScaler:
    """Optional standardization of continuous items (mean/sd per item)."""

    mean: Dict[str, float]
    scale: Dict[str, float]

    @classmethod
    def fit(cls, ds: Dataset) -> "ContinuousScaler":
        mean, scale = {}, {}
        for j in ds.schema.continuous_indices:
            pooled = np.concatenate([ds.y0[:, j], ds.y1[:, j]])
            name = ds.schema.items[j].name
            mean[name] = float(pooled.mean()) if pooled.size else 0.0
            sd = float(pooled.std()) if pooled.size else 1.0
            scale[name] = sd if sd > 0 else 1.0
        return cls(mean=mean, scale=scale)

    def transform_items(self, schema: ItemSchema, values: np.ndarray) -> np.ndarray:
        out = np.array(values, dtype=np.float64, copy=True)
        single = out.ndim == 1
        out = np.atleast_2d(out)
        for name, mu in self.mean.items():
            j = schema.index_of(name)
            out[:, j] = (out[:, j] - mu) / self.scale[name]
        return out[0] if single else out

    def transform(self, ds: Dataset) -> Dataset:
        return ds.with_items(self.transform_items(ds.schema, ds.y0), self.transform_items(ds.schema, ds.y1))
