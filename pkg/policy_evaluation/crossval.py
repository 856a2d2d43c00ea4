import itertools
import logging
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from scipy import stats
from sklearn.model_selection import KFold, StratifiedKFold

from errors import CrossValidationError
from latent_model.aggregate import AggregateSource
from latent_model.inference import policy_for_dataset
from latent_model.trainer import TrainingConfig, fit
from policy_evaluation.baseline import fit_linear_q
from policy_evaluation.value import Direction, OutcomeSpec, empirical_value, is_better, outcome_values
from seeding import substream
from trial_data.schema import Dataset
from trial_simulator.simulator import GroundTruth

logger = logging.getLogger(__name__)

METHODS = ("latent_itr", "linear_q")
REPEAT_DEPENDENCE_CAVEAT = (
    "Repeats re-split the same subjects, so per-repeat values are not independent; "
    "the paired t-test treats them as independent and overstates significance."
)


class MethodSummary(BaseModel):
    mean: float
    sd: float
    per_repeat: List[float]
    per_fold: List[List[float]] = Field(..., description="Raw fold values, one list per repeat")


class PairedTest(BaseModel):
    statistic: Optional[float] = None
    pvalue: Optional[float] = None
    n_repeats: int


class CrossValReport(BaseModel):
    folds: int
    repeats: int
    seed: int
    direction: Direction
    outcomes: List[str]
    methods: Dict[str, Dict[str, MethodSummary]]
    paired_tests: Dict[str, PairedTest] = Field(default_factory=dict)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def summary_frame(self) -> pd.DataFrame:
        rows = [
            {"method": method, "outcome": outcome, "mean": s.mean, "sd": s.sd}
            for method, by_outcome in self.methods.items()
            for outcome, s in by_outcome.items()
        ]
        return pd.DataFrame(rows, columns=["method", "outcome", "mean", "sd"])


def fold_splits(ds: Dataset, folds: int, seed: int, repeat: int) -> List[tuple]:
    """(train, test) index pairs, stratified by arm whenever every arm can fill every fold."""
    if folds < 2:
        raise CrossValidationError(f"folds must be >= 2, got {folds}")
    if folds > ds.n:
        raise CrossValidationError(f"cannot cut {ds.n} subjects into {folds} folds")
    random_state = int(substream(seed, "crossval", repeat).integers(2**31 - 1))
    if folds <= min(ds.arm_counts().values()):
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=random_state)
        splits = splitter.split(np.zeros(ds.n), ds.treatment)
    else:
        splitter = KFold(n_splits=folds, shuffle=True, random_state=random_state)
        splits = splitter.split(np.zeros(ds.n))
    pairs = []
    for fold, (train, test) in enumerate(splits):
        if len(test) == 0:
            raise CrossValidationError(f"fold {fold} of repeat {repeat} is empty")
        if len(np.unique(ds.treatment[train])) < 2:
            raise CrossValidationError(f"training complement of fold {fold} (repeat {repeat}) lacks an arm")
        pairs.append((np.sort(train), np.sort(test)))
    return pairs


def _evaluate_fold(
    ds: Dataset,
    train: np.ndarray,
    test: np.ndarray,
    config: TrainingConfig,
    outcomes: List[OutcomeSpec],
    R: Dict[str, np.ndarray],
    aggregate: AggregateSource,
    direction: Direction,
) -> Dict[str, Dict[str, float]]:
    train_ds, test_ds = ds.subset(train), ds.subset(test)
    model = fit(train_ds, config)
    policy = policy_for_dataset(model, test_ds, aggregate.resolve(model.measurement, direction))
    values: Dict[str, Dict[str, float]] = {method: {} for method in METHODS}
    for spec in outcomes:
        values["latent_itr"][spec.name] = empirical_value(policy, test_ds, R[spec.name][test], spec.name).empirical_value
        baseline = fit_linear_q(train_ds, R[spec.name][train])
        values["linear_q"][spec.name] = empirical_value(
            baseline.recommend_dataset(test_ds, direction), test_ds, R[spec.name][test], spec.name
        ).empirical_value
    return values


def _paired_test(proposed: List[float], baseline: List[float]) -> PairedTest:
    if len(proposed) < 2:
        return PairedTest(n_repeats=len(proposed))
    result = stats.ttest_rel(proposed, baseline)
    statistic, pvalue = float(result.statistic), float(result.pvalue)
    return PairedTest(
        statistic=statistic if np.isfinite(statistic) else None,
        pvalue=pvalue if np.isfinite(pvalue) else None,
        n_repeats=len(proposed),
    )


def crossval(
    ds: Dataset,
    folds: int,
    config: TrainingConfig,
    repeats: int = 1,
    outcomes: Optional[List[OutcomeSpec]] = None,
    direction: Direction = "minimize",
    aggregate: Optional[AggregateSource] = None,
    truth: Optional[GroundTruth] = None,
    seed: Optional[int] = None,
    threads: int = 1,
) -> CrossValReport:
    """Fit on each fold's complement, score both methods on the fold by IPW value."""
    if repeats < 1:
        raise CrossValidationError(f"repeats must be >= 1, got {repeats}")
    outcomes = outcomes or [OutcomeSpec()]
    aggregate = aggregate or AggregateSource()
    seed = config.seed if seed is None else seed
    R = {spec.name: outcome_values(spec, ds, truth) for spec in outcomes}

    tasks = [
        (repeat, fold, train, test)
        for repeat in range(repeats)
        for fold, (train, test) in enumerate(fold_splits(ds, folds, seed, repeat))
    ]
    logger.info(f"Cross-validating {len(tasks)} fits ({repeats} x {folds} folds, n={ds.n})")
    results = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_evaluate_fold)(ds, train, test, config, outcomes, R, aggregate, direction)
        for _, _, train, test in tasks
    )

    methods: Dict[str, Dict[str, MethodSummary]] = {method: {} for method in METHODS}
    for method, spec in itertools.product(METHODS, outcomes):
        per_fold = [
            [result[method][spec.name] for (r, _, _, _), result in zip(tasks, results) if r == repeat]
            for repeat in range(repeats)
        ]
        per_repeat = [float(np.mean(values)) for values in per_fold]
        methods[method][spec.name] = MethodSummary(
            mean=float(np.mean(per_repeat)),
            sd=float(np.std(per_repeat, ddof=1)) if repeats > 1 else 0.0,
            per_repeat=per_repeat,
            per_fold=per_fold,
        )
    paired = {
        spec.name: _paired_test(methods["latent_itr"][spec.name].per_repeat, methods["linear_q"][spec.name].per_repeat)
        for spec in outcomes
    }
    for spec in outcomes:
        logger.info(
            f"{spec.name}: latent_itr {methods['latent_itr'][spec.name].mean:.4f} "
            f"({methods['latent_itr'][spec.name].sd:.4f}) vs linear_q {methods['linear_q'][spec.name].mean:.4f} "
            f"({methods['linear_q'][spec.name].sd:.4f})"
        )
    return CrossValReport(
        folds=folds,
        repeats=repeats,
        seed=seed,
        direction=direction,
        outcomes=[spec.name for spec in outcomes],
        methods=methods,
        paired_tests=paired,
        metadata={"paired_test_caveat": REPEAT_DEPENDENCE_CAVEAT, "stratified_by": "treatment"},
    )


class TuneGrid(BaseModel):
    hidden: List[List[int]] = Field(default_factory=lambda: [[20, 10]], min_length=1)
    outer_iterations: List[int] = Field(default_factory=lambda: [6], min_length=1)


class TuneCandidate(BaseModel):
    hidden: List[int]
    outer_iterations: int
    mean: float
    sd: float


class TuneReport(BaseModel):
    outcome: str
    direction: Direction
    candidates: List[TuneCandidate]
    best: TuneCandidate


def tune(
    ds: Dataset,
    grid: TuneGrid,
    folds: int,
    config: TrainingConfig,
    repeats: int = 1,
    outcome: Optional[OutcomeSpec] = None,
    direction: Direction = "minimize",
    aggregate: Optional[AggregateSource] = None,
    truth: Optional[GroundTruth] = None,
    seed: Optional[int] = None,
    threads: int = 1,
    on_candidate: Optional[Callable[[TuneCandidate], None]] = None,
) -> TuneReport:
    """Pick hidden widths and outer-iteration count by cross-validated value; ties keep the earlier candidate."""
    outcome = outcome or OutcomeSpec()
    candidates: List[TuneCandidate] = []
    for hidden, iterations in itertools.product(grid.hidden, grid.outer_iterations):
        trial = TrainingConfig.model_validate(
            {**config.model_dump(), "hidden": hidden, "outer_iterations": iterations}
        )
        report = crossval(ds, folds, trial, repeats, [outcome], direction, aggregate, truth, seed, threads)
        summary = report.methods["latent_itr"][outcome.name]
        candidates.append(TuneCandidate(hidden=hidden, outer_iterations=iterations, mean=summary.mean, sd=summary.sd))
        logger.info(f"Candidate hidden={hidden}, outer_iterations={iterations}: {summary.mean:.4f} ({summary.sd:.4f})")
        if on_candidate is not None:
            on_candidate(candidates[-1])
    best = candidates[0]
    for candidate in candidates[1:]:
        if is_better(candidate.mean, best.mean, direction):
            best = candidate
    return TuneReport(outcome=outcome.name, direction=direction, candidates=candidates, best=best)
