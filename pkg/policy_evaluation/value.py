import logging
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from errors import DataValidationError, SchemaError, UnknownOutcomeError
from trial_data.schema import Dataset
from trial_simulator.simulator import GroundTruth, primary_loadings, realized_latent_sum

logger = logging.getLogger(__name__)

Direction = Literal["minimize", "maximize"]


class PolicyEvaluation(BaseModel):
    empirical_value: float
    n_matched: int = Field(..., ge=0)
    n: int = Field(..., ge=0)
    outcome_name: str
    std_error: Optional[float] = Field(None, description="Monte Carlo standard error of the IPW mean")

    @model_validator(mode="after")
    def _check(self):
        if self.n_matched > self.n:
            raise ValueError(f"n_matched={self.n_matched} exceeds n={self.n}")
        if not np.isfinite(self.empirical_value):
            raise ValueError("empirical value must be finite")
        return self


class OutcomeSpec(BaseModel):
    """Per-subject outcome R used to score a policy.

    `items` sums the named post-treatment items (all items when `items` is
    empty); `latent_sum` is the realized sum of Z1 and needs simulator truth.
    """

    name: str = "item_sum"
    source: Literal["items", "latent_sum"] = "items"
    items: List[str] = Field(default_factory=list)


def outcome_values(spec: OutcomeSpec, ds: Dataset, truth: Optional[GroundTruth] = None) -> np.ndarray:
    if spec.source == "latent_sum":
        if truth is None:
            raise UnknownOutcomeError(f"outcome '{spec.name}' needs simulator ground truth")
        if truth.n != ds.n:
            raise DataValidationError(f"ground truth has {truth.n} subjects, dataset has {ds.n}")
        return realized_latent_sum(truth, ds.treatment)
    if not spec.items:
        return ds.y1.sum(axis=1)
    try:
        return ds.item_columns(spec.items, "y1").sum(axis=1)
    except SchemaError as e:
        raise UnknownOutcomeError(f"outcome '{spec.name}': {e}") from None


def _aligned(values, n: int, label: str) -> np.ndarray:
    values = np.asarray(values).reshape(-1)
    if values.shape[0] != n:
        raise DataValidationError(f"{label} has {values.shape[0]} entries for {n} subjects")
    return values


def empirical_value(policy, ds: Dataset, outcome, outcome_name: str = "outcome") -> PolicyEvaluation:
    """IPW estimate (1/n) sum R_i 1{A_i = d_i} / P(A_i | X_i)."""
    policy = _aligned(policy, ds.n, "policy")
    outcome = _aligned(outcome, ds.n, "outcome").astype(np.float64)
    matched = policy == ds.treatment
    terms = np.where(matched, outcome * ds.weights, 0.0)
    value = float(terms.mean()) if ds.n else 0.0
    std_error = float(terms.std(ddof=1) / np.sqrt(ds.n)) if ds.n > 1 else None
    return PolicyEvaluation(
        empirical_value=value,
        n_matched=int(matched.sum()),
        n=ds.n,
        outcome_name=outcome_name,
        std_error=std_error,
    )


def optimal_accuracy(policy, truth) -> float:
    policy = np.asarray(policy).reshape(-1)
    truth = _aligned(truth, policy.shape[0], "optimal arms")
    if policy.shape[0] == 0:
        return 0.0
    return float(np.mean(policy == truth))


def is_better(candidate: float, reference: float, direction: Direction) -> bool:
    return candidate < reference if direction == "minimize" else candidate > reference


def loading_direction_agreement(model, truth: GroundTruth) -> float:
    """Share of generating primary item/domain loadings whose trend sign the fitted model reproduces.

    The trend of a discrete loading vector is its last minus its first
    category entry; a continuous loading is its own trend.
    """
    pairs = primary_loadings(truth)
    if not pairs:
        return 0.0
    agree = 0
    for name, domain, true_trend in pairs:
        j = model.schema.index_of(name)
        beta = model.measurement.beta[j][domain]
        fitted_trend = beta[-1] - beta[0] if model.schema.items[j].is_discrete else beta[0]
        agree += int(np.sign(fitted_trend) == np.sign(true_trend))
    return agree / len(pairs)
