import logging
from typing import List

import numpy as np
from pydantic import BaseModel, Field, model_validator
from sklearn.linear_model import Ridge

from policy_evaluation.value import Direction
from trial_data.schema import Dataset

logger = logging.getLogger(__name__)

RIDGE_PENALTY = 1e-6


class LinearQBaseline(BaseModel):
    """Q(f, a) = b0 + b.f + a * (g0 + g.f) with f = (y0 cast to reals, x)."""

    coefficients: List[float]
    feature_names: List[str] = Field(..., description="Layout of f, pre-treatment items first")

    @model_validator(mode="after")
    def _check_layout(self):
        expected = 2 * (1 + len(self.feature_names))
        if len(self.coefficients) != expected:
            raise ValueError(f"expected {expected} coefficients, got {len(self.coefficients)}")
        return self

    @property
    def main_effects(self) -> np.ndarray:
        return np.asarray(self.coefficients[: 1 + len(self.feature_names)])

    @property
    def interactions(self) -> np.ndarray:
        return np.asarray(self.coefficients[1 + len(self.feature_names):])

    def contrast(self, Y0, X) -> np.ndarray:
        """Q(f, +1) - Q(f, -1) per row."""
        F = _with_intercept(feature_matrix(Y0, X))
        return 2.0 * (F @ self.interactions)

    def recommend(self, Y0, X, direction: Direction = "minimize") -> np.ndarray:
        contrast = self.contrast(Y0, X)
        if direction == "minimize":
            return np.where(contrast <= 0.0, 1, -1)
        return np.where(contrast >= 0.0, 1, -1)

    def recommend_dataset(self, ds: Dataset, direction: Direction = "minimize") -> np.ndarray:
        return self.recommend(ds.y0, ds.x, direction)


def feature_matrix(Y0, X) -> np.ndarray:
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=np.float64))
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        X = X.reshape(Y0.shape[0], -1 if X.size else 0)
    return np.hstack([Y0, X])


def _with_intercept(F: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((F.shape[0], 1)), F])


def design_matrix(ds: Dataset) -> np.ndarray:
    F = _with_intercept(feature_matrix(ds.y0, ds.x))
    return np.hstack([F, ds.treatment[:, None] * F])


def fit_linear_q(ds: Dataset, outcome) -> LinearQBaseline:
    """Ridge (1e-6) least squares of R on (1, f, A, A*f)."""
    outcome = np.asarray(outcome, dtype=np.float64).reshape(-1)
    regression = Ridge(alpha=RIDGE_PENALTY, fit_intercept=False)
    regression.fit(design_matrix(ds), outcome)
    names = [f"y0_{name}" for name in ds.schema.names] + list(ds.covariate_names)
    logger.debug(f"Linear-Q fit on n={ds.n} with {len(names)} features")
    return LinearQBaseline(coefficients=regression.coef_.tolist(), feature_names=names)
