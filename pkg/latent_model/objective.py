"""The weighted training objective and its exact gradient.

    (1/n) sum_i w_i [ sum_j L(f_0j(Z_i0), Y_i0j) + sum_j L(f_1j(X_i, Z_i0), Y_i1j) ]

with w_i = 1 / P(A_i | X_i) and f_1j = decoder applied to the soft output of
the transition head for the arm subject i received.
"""
from dataclasses import dataclass
from typing import Dict

import numpy as np

from latent_model.measurement import MeasurementParams, measurement_backward, measurement_losses
from latent_model.transition import GradientTape, TransitionParams, backward, forward_batch
from trial_data.schema import Dataset


@dataclass
class ModelParams:
    """All fitted parameters theta: decoder plus transition network."""

    measurement: MeasurementParams
    transition: TransitionParams

    def named_arrays(self) -> Dict[str, np.ndarray]:
        return {**self.measurement.named_arrays(), **self.transition.named_arrays()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.measurement.copy(), self.transition.copy())

    @property
    def K(self) -> int:
        return self.measurement.K


def subject_losses(theta: ModelParams, Z0, X, A, Y0, Y1) -> tuple:
    """Unweighted pre- and post-treatment measurement losses per subject."""
    pre = measurement_losses(theta.measurement, Z0, Y0)
    Z1, _ = forward_batch(theta.transition, X, Z0, A)
    post = measurement_losses(theta.measurement, Z1, Y1)
    return pre, post


def total_objective(theta: ModelParams, latents, ds: Dataset) -> float:
    if ds.n == 0:
        return 0.0
    Z0 = np.asarray(latents, dtype=np.float64).reshape(ds.n, theta.K)
    pre, post = subject_losses(theta, Z0, ds.x, ds.treatment, ds.y0, ds.y1)
    return float(np.mean(ds.weights * (pre + post)))


def objective_and_gradient(theta: ModelParams, Z0, X, A, Y0, Y1, weights) -> tuple:
    """Mean weighted objective over the given rows and its GradientTape.

    Hard Z0 is treated as data; the decoder collects gradient from both the
    pre-treatment path and the post-treatment path through soft Z1.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = weights.shape[0]
    row_weights = weights / n

    pre = measurement_losses(theta.measurement, Z0, Y0)
    Z1, cache = forward_batch(theta.transition, X, Z0, A)
    post = measurement_losses(theta.measurement, Z1, Y1)
    value = float(np.sum(row_weights * (pre + post)))

    tape = GradientTape.zeros_like(theta.named_arrays())
    pre_grads, _ = measurement_backward(theta.measurement, Z0, Y0, row_weights)
    post_grads, grad_z1 = measurement_backward(theta.measurement, Z1, Y1, row_weights)
    for name in pre_grads:
        tape.add(name, pre_grads[name])
        tape.add(name, post_grads[name])
    tape += backward(theta.transition, cache, grad_z1)
    return value, tape
