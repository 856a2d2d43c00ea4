from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import SchemaError
from latent_model.measurement import MeasurementParams, domain_scores
from trial_data.dataset_io import read_json


class AggregateSpec(BaseModel):
    """Weights of g(z1) = sum_k weights_k * z1_k; higher g means healthier."""

    model_config = ConfigDict(frozen=True)

    weights: List[float] = Field(..., min_length=1)

    @field_validator("weights")
    @classmethod
    def _finite(cls, weights: List[float]) -> List[float]:
        if not all(np.isfinite(weights)):
            raise ValueError("aggregate weights must be finite")
        return weights

    @classmethod
    def plain_sum(cls, K: int) -> "AggregateSpec":
        return cls(weights=[1.0] * K)

    @property
    def K(self) -> int:
        return len(self.weights)

    def negated(self) -> "AggregateSpec":
        return AggregateSpec(weights=[-w for w in self.weights])

    def evaluate(self, z1) -> np.ndarray:
        return np.asarray(z1, dtype=np.float64) @ np.asarray(self.weights, dtype=np.float64)


class AggregateSource(BaseModel):
    """Where the aggregate weights come from.

    sum: all ones, negated when the outcome direction is "minimize" so that a
    larger latent sum counts as less healthy.
    model_scores: the fitted model's domain scores.
    file: a JSON file holding {"weights": [...]}, used as given.
    """

    kind: Literal["sum", "model_scores", "file"] = "sum"
    path: Optional[str] = None

    @model_validator(mode="after")
    def _needs_path(self):
        if self.kind == "file" and not self.path:
            raise ValueError("aggregate kind 'file' needs a path")
        return self

    def resolve(self, measurement: MeasurementParams, direction: str = "minimize") -> AggregateSpec:
        if self.kind == "model_scores":
            return AggregateSpec(weights=domain_scores(measurement).tolist())
        if self.kind == "file":
            spec = AggregateSpec.model_validate(read_json(Path(self.path)))
            if spec.K != measurement.K:
                raise SchemaError(f"aggregate file has {spec.K} weights for K={measurement.K}")
            return spec
        spec = AggregateSpec.plain_sum(measurement.K)
        return spec.negated() if direction == "minimize" else spec
