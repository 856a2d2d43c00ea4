"""Transition network h_z^(a)(X, Z0): shared rectifier layers, one sigmoid head per arm.

The reverse pass is written out by hand for this layout
(affine -> relu -> ... -> affine -> sigmoid); it is not a general autodiff.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from errors import ForwardCacheError
from latent_model.measurement import LatentState

logger = logging.getLogger(__name__)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    @classmethod
    def glorot(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "DenseLayer":
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return cls(weight=rng.uniform(-r, r, size=(fan_in, fan_out)), bias=np.zeros(fan_out))

    @classmethod
    def zeros(cls, fan_in: int, fan_out: int) -> "DenseLayer":
        return cls(weight=np.zeros((fan_in, fan_out)), bias=np.zeros(fan_out))

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return inputs @ self.weight + self.bias

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())

    def to_payload(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_payload(cls, payload: dict) -> "DenseLayer":
        weight = np.asarray(payload["weight"], dtype=np.float64)
        bias = np.asarray(payload["bias"], dtype=np.float64).reshape(-1)
        if weight.ndim != 2:
            weight = weight.reshape(-1, bias.size)
        return cls(weight=weight, bias=bias)


@dataclass
class TransitionParams:
    shared: List[DenseLayer]
    head_pos: DenseLayer
    head_neg: DenseLayer

    def __post_init__(self):
        if not self.shared:
            raise ValueError("the transition network needs at least one shared layer")
        for upper, lower in zip(self.shared[1:], self.shared[:-1]):
            if upper.weight.shape[0] != lower.weight.shape[1]:
                raise ValueError("shared layer dimensions do not chain")
        width = self.shared[-1].weight.shape[1]
        for head in (self.head_pos, self.head_neg):
            if head.weight.shape[0] != width:
                raise ValueError("head input width does not match the last shared layer")
        if self.head_pos.weight.shape != self.head_neg.weight.shape:
            raise ValueError("both arm heads must have the same shape")

    @classmethod
    def initialize(
        cls, n_covariates: int, K: int, hidden: Sequence[int], rng: np.random.Generator
    ) -> "TransitionParams":
        widths = [n_covariates + K, *hidden]
        shared = [DenseLayer.glorot(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        return cls(
            shared=shared,
            head_pos=DenseLayer.glorot(widths[-1], K, rng),
            head_neg=DenseLayer.glorot(widths[-1], K, rng),
        )

    @classmethod
    def zeros(cls, n_covariates: int, K: int, hidden: Sequence[int]) -> "TransitionParams":
        widths = [n_covariates + K, *hidden]
        return cls(
            shared=[DenseLayer.zeros(a, b) for a, b in zip(widths[:-1], widths[1:])],
            head_pos=DenseLayer.zeros(widths[-1], K),
            head_neg=DenseLayer.zeros(widths[-1], K),
        )

    @property
    def input_dim(self) -> int:
        return int(self.shared[0].weight.shape[0])

    @property
    def K(self) -> int:
        return int(self.head_pos.weight.shape[1])

    @property
    def hidden(self) -> List[int]:
        return [int(layer.weight.shape[1]) for layer in self.shared]

    def head(self, arm: int) -> DenseLayer:
        return self.head_pos if arm == 1 else self.head_neg

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.shared):
            arrays[f"shared.{i}.weight"] = layer.weight
            arrays[f"shared.{i}.bias"] = layer.bias
        for name, head in (("head_pos", self.head_pos), ("head_neg", self.head_neg)):
            arrays[f"{name}.weight"] = head.weight
            arrays[f"{name}.bias"] = head.bias
        return arrays

    def copy(self) -> "TransitionParams":
        return TransitionParams(
            shared=[layer.copy() for layer in self.shared],
            head_pos=self.head_pos.copy(),
            head_neg=self.head_neg.copy(),
        )

    def to_payload(self) -> dict:
        return {
            "shared": [layer.to_payload() for layer in self.shared],
            "head_pos": self.head_pos.to_payload(),
            "head_neg": self.head_neg.to_payload(),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "TransitionParams":
        return cls(
            shared=[DenseLayer.from_payload(p) for p in payload["shared"]],
            head_pos=DenseLayer.from_payload(payload["head_pos"]),
            head_neg=DenseLayer.from_payload(payload["head_neg"]),
        )


@dataclass
class ForwardCache:
    """Activations recorded by `forward_batch`, consumed by `backward`."""

    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    arms: np.ndarray
    outputs: np.ndarray
    consumed: bool = field(default=False)


class GradientTape:
    """Named partial derivatives, shaped like the parameter arrays they belong to."""

    def __init__(self, grads: Optional[Dict[str, np.ndarray]] = None):
        self.grads: Dict[str, np.ndarray] = dict(grads or {})

    @classmethod
    def zeros_like(cls, arrays: Dict[str, np.ndarray]) -> "GradientTape":
        return cls({name: np.zeros_like(array) for name, array in arrays.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def items(self):
        return self.grads.items()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + value
        else:
            self.grads[name] = np.array(value, dtype=np.float64, copy=True)

    def __iadd__(self, other: "GradientTape") -> "GradientTape":
        for name, value in other.items():
            self.add(name, value)
        return self

    def first_non_finite(self) -> Optional[str]:
        for name, value in self.grads.items():
            if not np.all(np.isfinite(value)):
                return name
        return None


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def forward_batch(params: TransitionParams, X, Z0, arms) -> tuple:
    """Soft post-treatment states for each row under its own arm, plus the cache."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=np.float64))
    arms = np.asarray(arms).reshape(-1)
    if X.shape[0] != Z0.shape[0] or arms.shape[0] != X.shape[0]:
        raise ValueError("covariates, latent states and arms must have the same number of rows")
    inputs = np.concatenate([X, Z0], axis=1)
    if inputs.shape[1] != params.input_dim:
        raise ValueError(f"expected {params.input_dim} inputs (P + K), got {inputs.shape[1]}")

    pre_activations, activations = [], []
    hidden = inputs
    for layer in params.shared:
        pre = layer(hidden)
        hidden = relu(pre)
        pre_activations.append(pre)
        activations.append(hidden)
    logits = np.where((arms == 1)[:, None], params.head_pos(hidden), params.head_neg(hidden))
    outputs = expit(logits)
    cache = ForwardCache(inputs, pre_activations, activations, arms, outputs)
    return outputs, cache


def forward(params: TransitionParams, x, z0, arm: int) -> LatentState:
    if isinstance(z0, LatentState):
        z0 = z0.values
    outputs, _ = forward_batch(params, np.reshape(x, (1, np.size(x))), np.reshape(z0, (1, -1)), [arm])
    return LatentState(outputs[0], mode="soft")


def backward(params: TransitionParams, cache: Optional[ForwardCache], grad_outputs) -> GradientTape:
    """Partial derivatives of a loss given dL/d(outputs) for the cached forward pass."""
    if cache is None or cache.consumed:
        raise ForwardCacheError("backward needs a fresh forward pass over the same inputs")
    grad_outputs = np.atleast_2d(np.asarray(grad_outputs, dtype=np.float64))
    if grad_outputs.shape != cache.outputs.shape:
        raise ForwardCacheError(
            f"gradient shape {grad_outputs.shape} does not match forward outputs {cache.outputs.shape}"
        )
    cache.consumed = True

    tape = GradientTape()
    s = cache.outputs
    grad_logits = grad_outputs * s * (1.0 - s)
    last = cache.activations[-1]
    pos = cache.arms == 1
    for name, head, mask in (("head_pos", params.head_pos, pos), ("head_neg", params.head_neg, ~pos)):
        tape.add(f"{name}.weight", last[mask].T @ grad_logits[mask])
        tape.add(f"{name}.bias", grad_logits[mask].sum(axis=0))
    grad_hidden = np.where(
        pos[:, None], grad_logits @ params.head_pos.weight.T, grad_logits @ params.head_neg.weight.T
    )

    for i in range(len(params.shared) - 1, -1, -1):
        # derivative of relu at 0 taken as 0
        grad_pre = grad_hidden * (cache.pre_activations[i] > 0.0)
        below = cache.activations[i - 1] if i > 0 else cache.inputs
        tape.add(f"shared.{i}.weight", below.T @ grad_pre)
        tape.add(f"shared.{i}.bias", grad_pre.sum(axis=0))
        grad_hidden = grad_pre @ params.shared[i].weight.T
    return tape
