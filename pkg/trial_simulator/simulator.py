"""Randomized-trial generator with known latent states and potential outcomes.

Reference data generating process (K domains, P covariates):

    z0_k          ~ Bernoulli(0.5)
    x             ~ N(0, I_P)
    p1_k^(a)      = sigmoid(c0_k + c_k.x + d_k.z0 + a * (e_k.x + f_k.z0))
    z1_k^(a)      ~ Bernoulli(p1_k^(a))          (drawn for both arms)
    A             = +1 with probability `propensity`, else -1
    items | z     ~ shared measurement model (softmax / linear + Gaussian noise)

Discrete item j with l categories loads on domain j mod K with the ramp
beta_m = loading_strength * (2m - (l - 1)) / (l - 1), running from
-loading_strength to +loading_strength, and alpha = -beta / 2, so z = 0
favours the lowest category and z = 1 the highest. Continuous item c loads on
domain c mod K with strength loading_strength * CONTINUOUS_STRENGTHS[c].
Every other item/domain pair gets a weak N(0, noise_scale^2) loading.
The optimal arm minimizes sum_k p1_k^(a); exact ties are settled by a fair
coin from the "simulate/ties" stream of `seed`.
"""
import logging
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.special import expit, softmax

from errors import DataValidationError, UnknownOutcomeError
from latent_model.measurement import MeasurementParams
from seeding import substream
from trial_data.dataset_io import read_json, write_json
from trial_data.schema import Anchor, Dataset, ItemSchema, ItemSpec, SchemaFile

logger = logging.getLogger(__name__)

CONTINUOUS_STRENGTHS = (1.0, 0.8, 0.5, 0.35, 0.2)


class SimConfig(BaseModel):
    n: int = Field(500, ge=1, description="Number of subjects")
    seed: int = Field(0, ge=0, description="Seed for subject draws")
    dgp_seed: int = Field(0, ge=0, description="Seed for the generating parameters")
    K: int = Field(3, ge=1)
    n_discrete: int = Field(9, ge=0)
    num_categories: int = Field(3, ge=2)
    n_continuous: int = Field(5, ge=0)
    n_covariates: int = Field(3, ge=0)
    propensity: float = Field(0.5, gt=0.0, lt=1.0)
    loading_strength: float = Field(2.0, ge=0.0)
    noise_scale: float = Field(0.5, ge=0.0)
    effect_scale: float = Field(1.0, ge=0.0, description="Multiplier of the treatment interaction terms")

    @model_validator(mode="after")
    def _check_dimensions(self):
        if self.n_discrete + self.n_continuous < 1:
            raise ValueError("the simulator needs at least one item")
        if self.n_discrete < self.K:
            raise ValueError(f"need at least K={self.K} discrete items to anchor every domain")
        return self


class TransitionCoefficients(BaseModel):
    intercept: List[float]  # c0, (K,)
    covariate: List[List[float]]  # c, (K, P)
    baseline: List[List[float]]  # d, (K, K)
    effect_covariate: List[List[float]]  # e, (K, P)
    effect_baseline: List[List[float]]  # f, (K, K)

    def probabilities(self, x: np.ndarray, z0: np.ndarray, arm: int) -> np.ndarray:
        c0 = np.asarray(self.intercept)
        K, P = len(c0), x.shape[1]
        c, d = np.asarray(self.covariate, dtype=np.float64).reshape(K, P), np.asarray(self.baseline)
        e = np.asarray(self.effect_covariate, dtype=np.float64).reshape(K, P)
        f = np.asarray(self.effect_baseline)
        logits = c0 + x @ c.T + z0 @ d.T + arm * (x @ e.T + z0 @ f.T)
        return expit(logits)


class GroundTruth(BaseModel):
    """Known latent states, potential outcomes and generating parameters."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    z0: np.ndarray
    z1_pos: np.ndarray
    z1_neg: np.ndarray
    p1_pos: np.ndarray
    p1_neg: np.ndarray
    y1_pos: np.ndarray
    y1_neg: np.ndarray
    optimal_arm: np.ndarray
    measurement: List[Dict[str, Any]]
    transition: TransitionCoefficients
    indicative_items: List[str]
    noise_scale: float
    config: SimConfig

    def to_payload(self) -> Dict[str, Any]:
        payload = {
            name: getattr(self, name).tolist()
            for name in ("z0", "z1_pos", "z1_neg", "p1_pos", "p1_neg", "y1_pos", "y1_neg", "optimal_arm")
        }
        payload.update(
            measurement=self.measurement,
            transition=self.transition.model_dump(),
            indicative_items=self.indicative_items,
            noise_scale=self.noise_scale,
            config=self.config.model_dump(),
        )
        return payload

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "GroundTruth":
        arrays = {
            name: np.asarray(payload[name], dtype=np.int64 if name in ("z0", "z1_pos", "z1_neg", "optimal_arm") else np.float64)
            for name in ("z0", "z1_pos", "z1_neg", "p1_pos", "p1_neg", "y1_pos", "y1_neg", "optimal_arm")
        }
        return cls(
            **arrays,
            measurement=payload["measurement"],
            transition=TransitionCoefficients.model_validate(payload["transition"]),
            indicative_items=payload["indicative_items"],
            noise_scale=payload["noise_scale"],
            config=SimConfig.model_validate(payload["config"]),
        )

    @property
    def n(self) -> int:
        return int(self.optimal_arm.shape[0])

    def potential(self, name: Literal["z1", "p1", "y1"], policy) -> np.ndarray:
        policy = np.asarray(policy).reshape(-1, 1)
        return np.where(policy == 1, getattr(self, f"{name}_pos"), getattr(self, f"{name}_neg"))


def simulation_schema(config: SimConfig) -> tuple:
    items = [ItemSpec(name=f"d{j + 1}", kind="discrete", num_categories=config.num_categories) for j in range(config.n_discrete)]
    items += [ItemSpec(name=f"c{c + 1}", kind="continuous") for c in range(config.n_continuous)]
    covariates = [f"x{p + 1}" for p in range(config.n_covariates)]
    return ItemSchema(items=items), covariates


def generating_measurement(config: SimConfig, schema: ItemSchema, rng: np.random.Generator) -> MeasurementParams:
    K = config.K
    params = MeasurementParams.zeros(schema, K)
    weak = config.noise_scale
    for j, item in enumerate(schema.items):
        params.beta[j][:] = rng.normal(0.0, weak, size=(K, item.width))
        if item.is_discrete:
            ramp = config.loading_strength * (2.0 * np.arange(item.width) - (item.width - 1)) / (item.width - 1)
            params.beta[j][j % K] = ramp
            params.alpha[j][:] = -ramp / 2.0
        else:
            c = j - config.n_discrete
            strength = CONTINUOUS_STRENGTHS[c % len(CONTINUOUS_STRENGTHS)]
            params.beta[j][c % K, 0] = config.loading_strength * strength
    return params


def generating_transition(config: SimConfig, rng: np.random.Generator) -> TransitionCoefficients:
    K, P = config.K, config.n_covariates
    baseline = 2.0 * np.eye(K) + rng.normal(0.0, 0.25, size=(K, K))
    return TransitionCoefficients(
        intercept=np.full(K, -1.0).tolist(),
        covariate=rng.normal(0.0, 0.5, size=(K, P)).tolist(),
        baseline=baseline.tolist(),
        effect_covariate=(config.effect_scale * rng.normal(0.0, 0.75, size=(K, P))).tolist(),
        effect_baseline=(config.effect_scale * rng.normal(0.0, 1.5, size=(K, K))).tolist(),
    )


def indicative_items(config: SimConfig, schema: ItemSchema) -> List[str]:
    """First discrete item of each domain plus the two strongest continuous items."""
    names = [schema.items[k].name for k in range(config.K)]
    names += [schema.items[config.n_discrete + c].name for c in range(min(2, config.n_continuous))]
    return names


def sample_items(
    params: MeasurementParams, Z: np.ndarray, noise_scale: float, rng: np.random.Generator
) -> np.ndarray:
    n = Z.shape[0]
    Y = np.zeros((n, len(params.schema)))
    for j, item in enumerate(params.schema.items):
        eta = params.alpha[j] + Z @ params.beta[j]
        if item.is_discrete:
            cumulative = np.cumsum(softmax(eta, axis=1), axis=1)
            u = rng.random(n)[:, None]
            Y[:, j] = np.minimum((u > cumulative).sum(axis=1), item.width - 1)
        else:
            Y[:, j] = eta[:, 0] + rng.normal(0.0, noise_scale, size=n)
    return Y


def optimal_arms(p1_pos: np.ndarray, p1_neg: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Arm with the smaller expected latent sum; exact ties take a coin flip."""
    pos, neg = p1_pos.sum(axis=1), p1_neg.sum(axis=1)
    coin = np.where(rng.random(pos.shape[0]) < 0.5, 1, -1)
    return np.where(pos < neg, 1, np.where(pos > neg, -1, coin))


def simulate(config: SimConfig) -> tuple:
    """Generate a randomized-trial Dataset and its GroundTruth."""
    schema, covariates = simulation_schema(config)
    param_rng = substream(config.dgp_seed, "simulate/params")
    measurement = generating_measurement(config, schema, param_rng)
    transition = generating_transition(config, param_rng)

    rng = substream(config.seed, "simulate/subjects")
    n, K = config.n, config.K
    z0 = (rng.random((n, K)) < 0.5).astype(np.float64)
    x = rng.standard_normal((n, config.n_covariates))
    p1_pos = transition.probabilities(x, z0, 1)
    p1_neg = transition.probabilities(x, z0, -1)
    z1_pos = (rng.random((n, K)) < p1_pos).astype(np.float64)
    z1_neg = (rng.random((n, K)) < p1_neg).astype(np.float64)
    treatment = np.where(rng.random(n) < config.propensity, 1, -1)

    item_rng = substream(config.seed, "simulate/items")
    y0 = sample_items(measurement, z0, config.noise_scale, item_rng)
    y1_pos = sample_items(measurement, z1_pos, config.noise_scale, item_rng)
    y1_neg = sample_items(measurement, z1_neg, config.noise_scale, item_rng)
    y1 = np.where((treatment == 1)[:, None], y1_pos, y1_neg)
    propensity = np.where(treatment == 1, config.propensity, 1.0 - config.propensity)

    optimal_arm = optimal_arms(p1_pos, p1_neg, substream(config.seed, "simulate/ties"))
    anchors = [Anchor(domain=k, item=schema.items[k].name, direction="+") for k in range(K)]
    dataset = Dataset(
        schema=schema,
        covariate_names=tuple(covariates),
        y0=y0,
        x=x,
        treatment=treatment,
        propensity=propensity,
        y1=y1,
        metadata={"anchors": [a.model_dump() for a in anchors]},
    )
    truth = GroundTruth(
        z0=z0.astype(np.int64),
        z1_pos=z1_pos.astype(np.int64),
        z1_neg=z1_neg.astype(np.int64),
        p1_pos=p1_pos,
        p1_neg=p1_neg,
        y1_pos=y1_pos,
        y1_neg=y1_neg,
        optimal_arm=optimal_arm,
        measurement=measurement.to_payload(),
        transition=transition,
        indicative_items=indicative_items(config, schema),
        noise_scale=config.noise_scale,
        config=config,
    )
    logger.info(
        f"Simulated n={n} (K={K}, arms +1/-1: {int((treatment == 1).sum())}/{int((treatment == -1).sum())}, "
        f"optimal +1 share {float(np.mean(optimal_arm == 1)):.3f})"
    )
    return dataset, truth


def simulation_schema_file(config: SimConfig, provenance: Optional[Dict[str, Any]] = None) -> SchemaFile:
    schema, covariates = simulation_schema(config)
    return SchemaFile(
        items=list(schema.items),
        covariates=covariates,
        anchors=[Anchor(domain=k, item=schema.items[k].name, direction="+") for k in range(config.K)],
        provenance=provenance,
    )


def oracle_outcomes(truth: GroundTruth, policy, outcome: str = "latent_sum", items: Optional[Sequence[str]] = None) -> np.ndarray:
    """Per-subject potential outcome under the arm the policy selects.

    `latent_sum` uses the expected latent sum (sum of Bernoulli probabilities);
    `item_subset` sums the stored potential items named in `items`
    (the indicative subset when omitted); `item_sum` sums all potential items.
    """
    if outcome == "latent_sum":
        return truth.potential("p1", policy).sum(axis=1)
    schema, _ = simulation_schema(truth.config)
    if outcome == "item_subset":
        names = list(items) if items else truth.indicative_items
        return truth.potential("y1", policy)[:, [schema.index_of(name) for name in names]].sum(axis=1)
    if outcome == "item_sum":
        return truth.potential("y1", policy).sum(axis=1)
    raise UnknownOutcomeError(f"unknown oracle outcome '{outcome}'")


def oracle_value(truth: GroundTruth, policy, outcome: str = "latent_sum", items: Optional[Sequence[str]] = None) -> float:
    return float(np.mean(oracle_outcomes(truth, policy, outcome, items)))


def realized_latent_sum(truth: GroundTruth, treatment) -> np.ndarray:
    """Latent sum actually realized under the assigned arm (observable only in simulation)."""
    return truth.potential("z1", treatment).sum(axis=1).astype(np.float64)


def primary_loadings(truth: GroundTruth) -> List[tuple]:
    """(item, domain, trend) for every strongly loaded generating pair."""
    config = truth.config
    schema, _ = simulation_schema(config)
    params = MeasurementParams.from_payload(schema, config.K, truth.measurement)
    pairs = []
    for j, item in enumerate(schema.items):
        c = j if item.is_discrete else j - config.n_discrete
        beta = params.beta[j][c % config.K]
        trend = beta[-1] - beta[0] if item.is_discrete else beta[0]
        if trend != 0.0:
            pairs.append((item.name, c % config.K, float(trend)))
    return pairs


def save_truth(truth: GroundTruth, path, provenance: Optional[Dict[str, Any]] = None) -> None:
    payload = truth.to_payload()
    if provenance is not None:
        payload["provenance"] = provenance
    write_json(path, payload)
    logger.info(f"Ground truth saved to {path}")


def load_truth(path) -> GroundTruth:
    try:
        payload = read_json(path)
    except FileNotFoundError:
        raise DataValidationError(f"ground-truth file not found: {path}") from None
    except orjson.JSONDecodeError as e:
        raise DataValidationError(f"ground-truth file {path} is not valid JSON: {e}") from None
    try:
        return GroundTruth.from_payload(payload)
    except (KeyError, ValidationError) as e:
        raise DataValidationError(f"ground-truth file {path} is malformed: {e}") from None
