import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, field_validator, model_validator
from sklearn.isotonic import isotonic_regression

from errors import LatentSearchError, NonFiniteGradientError, TrainingError
from latent_model.aggregate import AggregateSpec
from latent_model.measurement import ContinuousScaler, LatentState, MeasurementParams, state_losses, measurement_losses
from latent_model.objective import ModelParams, objective_and_gradient, total_objective
from latent_model.transition import GradientTape, TransitionParams, forward_batch
from seeding import substream
from trial_data.schema import Anchor, Dataset, ItemSchema

logger = logging.getLogger(__name__)

MAX_SEARCH_K = 20
SEARCH_CHUNK = 256
# Upper bound on (subject, candidate state) rows evaluated at once.
ROW_BUDGET = 1 << 16
SWEEP_TOLERANCE = 1e-9

# A LatentAssignment is an (n, K) array of hard states, one row per subject.
LatentAssignment = np.ndarray


class TrainingConfig(BaseModel):
    K: int = Field(3, ge=1, description="Number of binary latent domains")
    hidden: List[int] = Field(default_factory=lambda: [20, 10], min_length=1, description="Shared layer widths")
    epochs_per_iteration: int = Field(6, ge=1, description="Adam epochs (M) before each exact-search sweep")
    outer_iterations: int = Field(6, ge=0, description="Number of (M epochs + sweep) rounds")
    learning_rate: float = Field(0.1, gt=0.0)
    learning_rate_decay: float = Field(
        0.7, gt=0.0, le=1.0, description="Factor applied to the learning rate after each outer iteration"
    )
    batch_size: Optional[int] = Field(None, ge=1, description="Defaults from n when unset")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    seed: int = Field(0, ge=0)
    anchors: List[Anchor] = Field(default_factory=list)
    standardize_continuous: bool = False
    init_noise: float = Field(0.01, ge=0.0, description="Scale of the non-anchor loading noise")
    anchor_step: float = Field(1.0, gt=0.0, description="Step of the initial anchor ramp")

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, hidden: List[int]) -> List[int]:
        if any(width < 1 for width in hidden):
            raise ValueError("hidden widths must be >= 1")
        return hidden

    @model_validator(mode="after")
    def _check_anchors(self):
        if not self.anchors:
            return self
        domains = sorted(anchor.domain for anchor in self.anchors)
        if domains != list(range(self.K)):
            raise ValueError(f"each of the {self.K} domains needs exactly one anchor, got domains {domains}")
        items = [anchor.item for anchor in self.anchors]
        if len(set(items)) != len(items):
            raise ValueError("anchor items must be distinct")
        return self


class ObjectiveRecord(BaseModel):
    phase: Literal["init", "adam", "search"]
    iteration: int
    objective: float
    changed: Optional[int] = None


@dataclass
class FittedModel:
    schema: ItemSchema
    covariate_names: tuple
    K: int
    measurement: MeasurementParams
    transition: TransitionParams
    aggregate: AggregateSpec
    anchors: List[Anchor]
    config: TrainingConfig
    objective_log: List[ObjectiveRecord] = field(default_factory=list)
    scaler: Optional[ContinuousScaler] = None
    training_latents: Optional[np.ndarray] = None

    @property
    def theta(self) -> ModelParams:
        return ModelParams(self.measurement, self.transition)

    def prepare_items(self, y0) -> np.ndarray:
        """Apply the stored continuous-item standardization, if any."""
        y0 = np.asarray(y0, dtype=np.float64)
        return self.scaler.transform_items(self.schema, y0) if self.scaler else y0


def default_batch_size(n: int) -> int:
    """n/4 rounded to a multiple of 50, capped at 500, never above n."""
    size = 50 * math.floor(n / 4 / 50 + 0.5)
    return max(1, min(max(size, 50), 500, n))


def resolve_batch_size(config: TrainingConfig, n: int) -> int:
    if config.batch_size is None:
        return default_batch_size(n)
    return max(1, min(config.batch_size, n))


def resolve_anchors(config: TrainingConfig, ds: Dataset) -> List[Anchor]:
    """Anchors with item indices; falls back to schema anchors, then to the first discrete items."""
    anchors = list(config.anchors)
    if not anchors:
        stored = [Anchor.model_validate(a) for a in ds.metadata.get("anchors", [])]
        if stored and sorted(a.domain for a in stored) == list(range(config.K)):
            anchors = stored
    if not anchors:
        discrete = ds.schema.discrete_indices
        if len(discrete) < config.K:
            raise TrainingError(f"cannot place {config.K} anchors: only {len(discrete)} discrete items")
        logger.warning(f"No anchors configured; anchoring domain k on discrete item {discrete[:config.K]} with '+'")
        anchors = [Anchor(domain=k, item=discrete[k], direction="+") for k in range(config.K)]
    resolved = [Anchor(domain=a.domain, item=ds.schema.index_of(a.item), direction=a.direction) for a in anchors]
    if len({a.item for a in resolved}) != len(resolved):
        raise TrainingError("anchor items must be distinct")
    return sorted(resolved, key=lambda a: a.domain)


def apply_anchor_constraints(measurement: MeasurementParams, anchors: List[Anchor]) -> None:
    """Project each anchor loading vector onto the monotone cone of its direction, in place."""
    for anchor in anchors:
        row = measurement.beta[anchor.item][anchor.domain]
        increasing = anchor.direction == "+"
        if measurement.schema.items[anchor.item].is_discrete:
            row[:] = isotonic_regression(row, increasing=increasing)
        else:
            row[:] = max(row[0], 0.0) if increasing else min(row[0], 0.0)


def initialize_parameters(ds: Dataset, config: TrainingConfig, anchors: List[Anchor]) -> ModelParams:
    rng = substream(config.seed, "init")
    schema, K = ds.schema, config.K
    measurement = MeasurementParams.zeros(schema, K)
    for j, item in enumerate(schema.items):
        pooled = np.concatenate([ds.y0[:, j], ds.y1[:, j]])
        if item.is_discrete:
            counts = np.bincount(pooled.astype(np.int64), minlength=item.width) + 0.5
            log_freq = np.log(counts / counts.sum())
            measurement.alpha[j][:] = log_freq - log_freq.mean()
        else:
            measurement.alpha[j][0] = pooled.mean() if pooled.size else 0.0
        measurement.beta[j][:] = rng.normal(0.0, config.init_noise, size=(K, item.width))
    for anchor in anchors:
        sign = 1.0 if anchor.direction == "+" else -1.0
        width = schema.items[anchor.item].width
        if width > 1:
            measurement.beta[anchor.item][anchor.domain] = sign * config.anchor_step * np.arange(width)
        else:
            measurement.beta[anchor.item][anchor.domain] = sign * config.anchor_step
    apply_anchor_constraints(measurement, anchors)
    transition = TransitionParams.initialize(len(ds.covariate_names), K, config.hidden, rng)
    return ModelParams(measurement, transition)


def check_search_size(K: int) -> None:
    if K > MAX_SEARCH_K:
        raise LatentSearchError(f"exhaustive search over 2^{K} states exceeds the K <= {MAX_SEARCH_K} guard")


def states_for(K: int, codes) -> np.ndarray:
    """Binary states for integer codes; the first domain is the most significant bit."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1, 1)
    shifts = np.arange(K - 1, -1, -1, dtype=np.int64)
    return ((codes >> shifts) & 1).astype(np.float64)


def all_states(K: int) -> np.ndarray:
    """Every binary state of length K in lexicographic order."""
    check_search_size(K)
    return states_for(K, np.arange(2 ** K))


def subjects_per_chunk(K: int) -> int:
    return max(1, min(SEARCH_CHUNK, ROW_BUDGET // 2 ** K))


def blockwise_argmin(losses_for: Callable[[np.ndarray], np.ndarray], m: int, K: int) -> np.ndarray:
    """Code of the first minimal state for each of m subjects.

    The state table is generated in blocks so that at most ROW_BUDGET
    (subject, state) losses exist at once. A later block only wins on a
    strictly smaller loss, which keeps the lexicographically smallest minimizer.
    """
    total = 2 ** K
    block = max(1, ROW_BUDGET // max(m, 1))
    best = np.zeros(m, dtype=np.int64)
    best_loss = np.full(m, np.inf)
    rows = np.arange(m)
    for start in range(0, total, block):
        losses = losses_for(states_for(K, np.arange(start, min(total, start + block))))
        local = np.argmin(losses, axis=1)
        local_loss = losses[rows, local]
        better = local_loss < best_loss
        best[better] = start + local[better]
        best_loss[better] = local_loss[better]
    return best


def search_losses(theta: ModelParams, states: np.ndarray, X, A, Y0, Y1) -> np.ndarray:
    """Unweighted pre + post loss for every (subject, candidate state), shape (m, S)."""
    m, S = Y0.shape[0], states.shape[0]
    pre = state_losses(theta.measurement, states, Y0)
    Z1, _ = forward_batch(
        theta.transition,
        np.repeat(X, S, axis=0),
        np.tile(states, (m, 1)),
        np.repeat(A, S),
    )
    post = measurement_losses(theta.measurement, Z1, np.repeat(Y1, S, axis=0)).reshape(m, S)
    return pre + post


def _search_chunk(theta: ModelParams, ds: Dataset, rows: slice) -> np.ndarray:
    X, A, Y0, Y1 = ds.x[rows], ds.treatment[rows], ds.y0[rows], ds.y1[rows]
    return blockwise_argmin(lambda states: search_losses(theta, states, X, A, Y0, Y1), Y0.shape[0], theta.K)


def exact_latent_search(theta: ModelParams, ds: Dataset, i: int) -> LatentState:
    check_search_size(theta.K)
    code = _search_chunk(theta, ds, slice(i, i + 1))
    return LatentState(states_for(theta.K, code)[0], mode="hard")


def latent_sweep(theta: ModelParams, ds: Dataset, threads: int = 1) -> LatentAssignment:
    """Exact search for every subject against read-only theta."""
    check_search_size(theta.K)
    if ds.n == 0:
        return np.zeros((0, theta.K))
    size = subjects_per_chunk(theta.K)
    chunks = [slice(start, start + size) for start in range(0, ds.n, size)]
    codes = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_search_chunk)(theta, ds, rows) for rows in chunks
    )
    return states_for(theta.K, np.concatenate(codes))


def iteration_learning_rate(config: TrainingConfig, iteration: int) -> float:
    return config.learning_rate * config.learning_rate_decay ** (iteration - 1)


class AdamOptimizer:
    def __init__(self, arrays: Dict[str, np.ndarray], config: TrainingConfig):
        self.learning_rate = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.epsilon = config.adam_epsilon
        self.m = {name: np.zeros_like(a) for name, a in arrays.items()}
        self.v = {name: np.zeros_like(a) for name, a in arrays.items()}
        self.t = 0

    def step(self, arrays: Dict[str, np.ndarray], tape: GradientTape) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in arrays.items():
            g = tape[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


def adam_epoch(
    theta: ModelParams,
    optimizer: AdamOptimizer,
    latents: LatentAssignment,
    ds: Dataset,
    config: TrainingConfig,
    epoch: int,
    anchors: Optional[List[Anchor]] = None,
) -> ModelParams:
    """One pass of Adam over seeded, shuffled mini-batches; updates theta in place."""
    anchors = resolve_anchors(config, ds) if anchors is None else anchors
    n = ds.n
    batch_size = resolve_batch_size(config, n)
    order = substream(config.seed, "shuffle", epoch).permutation(n)
    weights = ds.weights
    arrays = theta.named_arrays()
    for start in range(0, n, batch_size):
        rows = order[start:start + batch_size]
        value, tape = objective_and_gradient(
            theta, latents[rows], ds.x[rows], ds.treatment[rows], ds.y0[rows], ds.y1[rows], weights[rows]
        )
        bad = tape.first_non_finite()
        if bad is not None:
            raise NonFiniteGradientError(bad)
        optimizer.step(arrays, tape)
        apply_anchor_constraints(theta.measurement, anchors)
        logger.debug(f"epoch {epoch} batch {start // batch_size}: batch objective {value:.6f}")
    return theta


def fit(
    ds: Dataset,
    config: TrainingConfig,
    threads: int = 1,
    on_iteration: Optional[Callable[[ObjectiveRecord], None]] = None,
) -> FittedModel:
    """Alternate M Adam epochs with one exact search sweep, outer_iterations times.

    `on_iteration` receives the search record after every sweep.
    """
    ds.require_both_arms()
    scaler = ContinuousScaler.fit(ds) if config.standardize_continuous else None
    work = scaler.transform(ds) if scaler else ds
    anchors = resolve_anchors(config, work)

    theta = initialize_parameters(work, config, anchors)
    latents = latent_sweep(theta, work, threads)
    log = [ObjectiveRecord(phase="init", iteration=0, objective=total_objective(theta, latents, work))]
    logger.info(f"Initial objective {log[-1].objective:.6f} (n={work.n}, K={config.K}, batch={resolve_batch_size(config, work.n)})")

    optimizer = AdamOptimizer(theta.named_arrays(), config)
    epoch = 0
    for iteration in range(1, config.outer_iterations + 1):
        optimizer.learning_rate = iteration_learning_rate(config, iteration)
        for _ in range(config.epochs_per_iteration):
            adam_epoch(theta, optimizer, latents, work, config, epoch, anchors)
            epoch += 1
        before = total_objective(theta, latents, work)
        _check_finite(before, "adam", iteration)
        log.append(ObjectiveRecord(phase="adam", iteration=iteration, objective=before))

        updated = latent_sweep(theta, work, threads)
        after = total_objective(theta, updated, work)
        _check_finite(after, "search", iteration)
        if after > before + SWEEP_TOLERANCE * max(1.0, abs(before)):
            raise TrainingError(f"exact search increased the objective at iteration {iteration}: {before} -> {after}")
        changed = int(np.any(updated != latents, axis=1).sum())
        latents = updated
        log.append(ObjectiveRecord(phase="search", iteration=iteration, objective=after, changed=changed))
        logger.info(
            f"Iteration {iteration}/{config.outer_iterations} (lr {optimizer.learning_rate:.4g}): "
            f"objective {before:.6f} after Adam, {after:.6f} after search ({changed} states changed)"
        )
        if on_iteration is not None:
            on_iteration(log[-1])

    return FittedModel(
        schema=ds.schema,
        covariate_names=ds.covariate_names,
        K=config.K,
        measurement=theta.measurement,
        transition=theta.transition,
        aggregate=AggregateSpec.plain_sum(config.K),
        anchors=anchors,
        config=config.model_copy(update={"anchors": anchors}),
        objective_log=log,
        scaler=scaler,
        training_latents=latents,
    )


def _check_finite(value: float, phase: str, iteration: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"objective is not finite after {phase} at iteration {iteration}")
