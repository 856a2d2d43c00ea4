"""Command-line pipeline: simulate -> train -> recommend -> evaluate, plus crossval and tune."""
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional

import click
import numpy as np
import orjson
import pandas as pd
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from errors import CrossValidationError, DataValidationError, SchemaError, UnknownOutcomeError
from latent_model.inference import estimate_baseline_states, latent_recovery_accuracy, policy_for_dataset, recommend_batch
from latent_model.model_store import load_model, save_model
from latent_model.trainer import fit
from logging_setup import configure_logging
from policy_evaluation.baseline import fit_linear_q
from policy_evaluation.crossval import crossval, tune
from policy_evaluation.value import (
    OutcomeSpec,
    empirical_value,
    loading_direction_agreement,
    optimal_accuracy,
    outcome_values,
)
from run_config import RunConfig
from settings import get_settings
from trial_data.dataset_io import load_dataset, load_features, save_dataset, save_schema, write_json, write_manifest
from trial_data.schema import Dataset
from trial_simulator import simulator

logger = logging.getLogger(__name__)

console = Console()
err_console = Console(stderr=True)

app = typer.Typer(
    help="Latent-state individualized treatment rules for randomized trials.",
    no_args_is_help=True,
    add_completion=False,
)

EXIT_VALIDATION = 2
EXIT_FAILURE = 1
VALIDATION_ERRORS = (ValidationError, DataValidationError, SchemaError, UnknownOutcomeError, CrossValidationError)

ConfigOption = Annotated[Optional[Path], typer.Option("--config", help="JSON run config; flags override it")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Top-level seed for every random stream")]
ThreadsOption = Annotated[Optional[int], typer.Option("--threads", help="Worker cap; results do not depend on it")]
SchemaOption = Annotated[Path, typer.Option("--schema", help="Schema JSON file")]
DataOption = Annotated[Path, typer.Option("--data", help="Trial CSV file")]
DirectionOption = Annotated[Optional[str], typer.Option("--direction", help="minimize or maximize the outcome")]
AggregateOption = Annotated[Optional[str], typer.Option("--aggregate", help="sum, model_scores or file")]
AggregateFileOption = Annotated[Optional[Path], typer.Option("--aggregate-file", help='JSON {"weights": [...]}')]


@app.callback()
def main() -> None:
    configure_logging(get_settings())


@contextmanager
def command_guard(command: str):
    """Map failures to exit codes: 2 for invalid input, 1 for anything else."""
    try:
        yield
    except (typer.Exit, click.exceptions.ClickException):
        raise
    except VALIDATION_ERRORS as e:
        logger.error(f"Invalid input for {command}: {str(e)}")
        err_console.print(f"[bold red]Invalid input:[/bold red] {e}")
        raise typer.Exit(code=EXIT_VALIDATION)
    except Exception as e:
        logger.error(f"Error in {command}: {str(e)}", exc_info=True)
        err_console.print(f"[bold red]{command} failed:[/bold red] {e}")
        raise typer.Exit(code=EXIT_FAILURE)


def _threads(value: Optional[int]) -> int:
    return value if value is not None else get_settings().threads


def _parse_widths(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def _echo_config(run: RunConfig, command: str) -> Dict[str, Any]:
    provenance = run.provenance(command)
    console.print_json(orjson.dumps(provenance["config"]).decode())
    return provenance


def _aggregate_overrides(aggregate: Optional[str], aggregate_file: Optional[Path]) -> Dict[str, Any]:
    return {"aggregate.kind": aggregate, "aggregate.path": str(aggregate_file) if aggregate_file else None}


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        console=err_console,
        transient=True,
    )


def _load_truth(path: Optional[Path], dataset: Dataset) -> Optional[simulator.GroundTruth]:
    if path is None:
        return None
    truth = simulator.load_truth(path)
    if truth.n != dataset.n:
        raise DataValidationError(f"ground truth {path} has {truth.n} subjects but the data has {dataset.n}")
    return truth


@app.command("simulate")
def cmd_simulate(
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: Annotated[Path, typer.Option("--out", help="Output directory")] = Path("."),
    name: Annotated[str, typer.Option("--name", help="Base name of the written files")] = "sim",
    n: Annotated[Optional[int], typer.Option("--n", help="Number of subjects")] = None,
    k: Annotated[Optional[int], typer.Option("--k", help="Latent domains")] = None,
    propensity: Annotated[Optional[float], typer.Option("--propensity")] = None,
    loading_strength: Annotated[Optional[float], typer.Option("--loading-strength")] = None,
    noise_scale: Annotated[Optional[float], typer.Option("--noise-scale")] = None,
    effect_scale: Annotated[Optional[float], typer.Option("--effect-scale")] = None,
    dgp_seed: Annotated[Optional[int], typer.Option("--dgp-seed", help="Seed of the generating parameters")] = None,
):
    """Write <name>.csv, <name>.schema.json and <name>.truth.json."""
    with command_guard("simulate"):
        run = RunConfig.load(
            config,
            {
                "seed": seed,
                "threads": _threads(threads),
                "out": str(out),
                "simulation.n": n,
                "simulation.K": k,
                "simulation.propensity": propensity,
                "simulation.loading_strength": loading_strength,
                "simulation.noise_scale": noise_scale,
                "simulation.effect_scale": effect_scale,
                "simulation.dgp_seed": dgp_seed,
            },
        )
        provenance = _echo_config(run, "simulate")
        dataset, truth = simulator.simulate(run.simulation)

        data_path = out / f"{name}.csv"
        save_dataset(dataset, data_path)
        write_manifest(data_path, provenance)
        save_schema(simulator.simulation_schema_file(run.simulation, provenance), out / f"{name}.schema.json")
        simulator.save_truth(truth, out / f"{name}.truth.json", provenance)

        table = Table(title="Simulated Trial")
        table.add_column("Metric")
        table.add_column("Value", justify="right")
        counts = dataset.arm_counts()
        table.add_row("Subjects", str(dataset.n))
        table.add_row("Arm +1 / -1", f"{counts[1]} / {counts[-1]}")
        table.add_row("Optimal arm +1 share", f"{float(np.mean(truth.optimal_arm == 1)):.3f}")
        console.print(table)
        console.print(f"[green]Data saved to {data_path}[/green]")


@app.command("train")
def cmd_train(
    data: DataOption,
    schema: SchemaOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: Annotated[Path, typer.Option("--out", help="Model file")] = Path("models/model.json"),
    k: Annotated[Optional[int], typer.Option("--k", help="Latent domains")] = None,
    hidden: Annotated[Optional[str], typer.Option("--hidden", help="Shared layer widths, e.g. 20,10")] = None,
    epochs_per_iteration: Annotated[Optional[int], typer.Option("--epochs-per-iteration")] = None,
    outer_iterations: Annotated[Optional[int], typer.Option("--outer-iterations")] = None,
    learning_rate: Annotated[Optional[float], typer.Option("--learning-rate")] = None,
    learning_rate_decay: Annotated[
        Optional[float], typer.Option("--learning-rate-decay", help="Per-iteration learning-rate factor")
    ] = None,
    batch_size: Annotated[Optional[int], typer.Option("--batch-size")] = None,
    standardize_continuous: Annotated[
        Optional[bool], typer.Option("--standardize-continuous/--no-standardize-continuous")
    ] = None,
):
    """Fit the measurement model and transition network; write the model file."""
    with command_guard("train"):
        run = RunConfig.load(
            config,
            {
                "seed": seed,
                "threads": _threads(threads),
                "out": str(out),
                "training.K": k,
                "training.hidden": _parse_widths(hidden),
                "training.epochs_per_iteration": epochs_per_iteration,
                "training.outer_iterations": outer_iterations,
                "training.learning_rate": learning_rate,
                "training.learning_rate_decay": learning_rate_decay,
                "training.batch_size": batch_size,
                "training.standardize_continuous": standardize_continuous,
            },
        )
        provenance = _echo_config(run, "train")
        dataset = load_dataset(data, schema)
        with _progress() as progress:
            task = progress.add_task("Training", total=run.training.outer_iterations)
            model = fit(dataset, run.training, threads=run.threads, on_iteration=lambda _: progress.advance(task))
        save_model(model, out, provenance)

        table = Table(title="Objective Trace")
        table.add_column("Phase")
        table.add_column("Iteration", justify="right")
        table.add_column("Objective", justify="right")
        table.add_column("Changed", justify="right")
        for record in model.objective_log:
            changed = "" if record.changed is None else str(record.changed)
            table.add_row(record.phase, str(record.iteration), f"{record.objective:.6f}", changed)
        console.print(table)
        console.print(f"[green]Model saved to {out}[/green]")


@app.command("recommend")
def cmd_recommend(
    model: Annotated[Path, typer.Option("--model", help="Model file")],
    data: DataOption,
    schema: SchemaOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: Annotated[Path, typer.Option("--out", help="Recommendations CSV")] = Path("recommendations.csv"),
    aggregate: AggregateOption = None,
    aggregate_file: AggregateFileOption = None,
    direction: DirectionOption = None,
):
    """Estimated baseline states, per-arm aggregates and the chosen arm for every row."""
    with command_guard("recommend"):
        run = RunConfig.load(
            config,
            {"seed": seed, "threads": _threads(threads), "out": str(out), "direction": direction}
            | _aggregate_overrides(aggregate, aggregate_file),
        )
        provenance = _echo_config(run, "recommend")
        fitted = load_model(model)
        schema_file, Y0, X = load_features(data, schema)
        if schema_file.item_schema != fitted.schema or list(schema_file.covariates) != list(fitted.covariate_names):
            raise SchemaError("data schema does not match the schema the model was trained on")
        spec = run.aggregate.resolve(fitted.measurement, run.direction)
        frame = recommend_batch(fitted, Y0, X, spec, threads=run.threads)
        frame.insert(0, "subject", np.arange(len(frame), dtype=np.int64))
        out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False, lineterminator="\n")
        write_manifest(out, provenance | {"aggregate_weights": spec.weights})
        console.print(f"[green]{len(frame)} recommendations saved to {out}[/green]")


def _read_policy(path: Path, n: int) -> np.ndarray:
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise DataValidationError(f"policy file not found: {path}") from None
    if "chosen_arm" not in frame.columns:
        raise DataValidationError("missing column", column="chosen_arm")
    policy = frame["chosen_arm"].to_numpy()
    if len(policy) != n:
        raise DataValidationError(f"policy file has {len(policy)} rows for {n} subjects")
    bad = ~np.isin(policy, (-1, 1))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataValidationError(f"arm must be -1 or 1, got {policy[row]!r}", row=row, column="chosen_arm")
    return policy.astype(np.int64)


def _baseline_outcome(run: RunConfig) -> OutcomeSpec:
    return next((spec for spec in run.outcomes if spec.source == "items"), OutcomeSpec())


@app.command("evaluate")
def cmd_evaluate(
    data: DataOption,
    schema: SchemaOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: Annotated[Path, typer.Option("--out", help="Report JSON")] = Path("evaluation.json"),
    model: Annotated[Optional[Path], typer.Option("--model", help="Model file to evaluate")] = None,
    policy: Annotated[Optional[Path], typer.Option("--policy", help="CSV with a chosen_arm column")] = None,
    truth: Annotated[Optional[Path], typer.Option("--truth", help="Ground-truth JSON of the evaluated data")] = None,
    oracle: Annotated[bool, typer.Option("--oracle", help="Add oracle values and optimal-arm accuracy")] = False,
    baseline_data: Annotated[
        Optional[Path], typer.Option("--baseline-data", help="Training CSV for the linear-Q comparator")
    ] = None,
    folds: Annotated[Optional[int], typer.Option("--folds", help="Also cross-validate on --data")] = None,
    repeats: Annotated[Optional[int], typer.Option("--repeats")] = None,
    aggregate: AggregateOption = None,
    aggregate_file: AggregateFileOption = None,
    direction: DirectionOption = None,
):
    """IPW empirical values, oracle values and accuracy, and optional cross-validation."""
    with command_guard("evaluate"):
        run = RunConfig.load(
            config,
            {
                "seed": seed,
                "threads": _threads(threads),
                "out": str(out),
                "folds": folds,
                "repeats": repeats,
                "direction": direction,
            }
            | _aggregate_overrides(aggregate, aggregate_file),
        )
        if model is None and policy is None and baseline_data is None:
            raise typer.BadParameter("give --model, --policy or --baseline-data")
        if oracle and truth is None:
            raise typer.BadParameter("--oracle needs --truth")
        provenance = _echo_config(run, "evaluate")
        dataset = load_dataset(data, schema)
        ground_truth = _load_truth(truth, dataset)

        policies: Dict[str, np.ndarray] = {}
        report: Dict[str, Any] = {"provenance": provenance, "n": dataset.n}
        fitted = None
        if model is not None:
            fitted = load_model(model)
            spec = run.aggregate.resolve(fitted.measurement, run.direction)
            policies["latent_itr"] = policy_for_dataset(fitted, dataset, spec, threads=run.threads)
        if policy is not None:
            policies["policy_file"] = _read_policy(policy, dataset.n)
        if baseline_data is not None:
            train_ds = load_dataset(baseline_data, schema)
            outcome = _baseline_outcome(run)
            baseline = fit_linear_q(train_ds, outcome_values(outcome, train_ds))
            policies["linear_q"] = baseline.recommend_dataset(dataset, run.direction)
            report["linear_q"] = baseline.model_dump()

        outcomes = {spec.name: outcome_values(spec, dataset, ground_truth) for spec in run.outcomes}
        report["policies"] = {}
        for name, arms in policies.items():
            entry: Dict[str, Any] = {
                "values": {
                    outcome: empirical_value(arms, dataset, R, outcome).model_dump() for outcome, R in outcomes.items()
                }
            }
            if oracle:
                entry["oracle"] = {
                    "latent_sum": simulator.oracle_value(ground_truth, arms, "latent_sum"),
                    "item_subset": simulator.oracle_value(ground_truth, arms, "item_subset"),
                    "optimal_accuracy": optimal_accuracy(arms, ground_truth.optimal_arm),
                }
            report["policies"][name] = entry
        if oracle:
            report["optimal_policy"] = {
                "latent_sum": simulator.oracle_value(ground_truth, ground_truth.optimal_arm, "latent_sum"),
                "item_subset": simulator.oracle_value(ground_truth, ground_truth.optimal_arm, "item_subset"),
            }
        if fitted is not None and ground_truth is not None:
            report["latent_recovery_accuracy"] = latent_recovery_accuracy(
                estimate_baseline_states(fitted, dataset.y0, threads=run.threads), ground_truth.z0
            )
            report["loading_direction_agreement"] = loading_direction_agreement(fitted, ground_truth)
        if folds is not None:
            report["crossval"] = crossval(
                dataset,
                run.folds,
                run.training,
                run.repeats,
                run.outcomes,
                run.direction,
                run.aggregate,
                ground_truth,
                threads=run.threads,
            ).model_dump()
        write_json(out, report)
        _print_evaluation(report)
        console.print(f"[green]Report saved to {out}[/green]")


def _print_evaluation(report: Dict[str, Any]) -> None:
    table = Table(title="Policy Evaluation")
    table.add_column("Policy")
    table.add_column("Outcome")
    table.add_column("IPW value", justify="right")
    table.add_column("Std. error", justify="right")
    table.add_column("Matched", justify="right")
    for name, entry in report["policies"].items():
        for outcome, value in entry["values"].items():
            se = "" if value["std_error"] is None else f"{value['std_error']:.4f}"
            table.add_row(name, outcome, f"{value['empirical_value']:.4f}", se, f"{value['n_matched']}/{value['n']}")
        if "oracle" in entry:
            oracle = entry["oracle"]
            table.add_row(name, "oracle latent_sum", f"{oracle['latent_sum']:.4f}", "", "")
            table.add_row(name, "optimal accuracy", f"{oracle['optimal_accuracy']:.3f}", "", "")
    console.print(table)


@app.command("crossval")
def cmd_crossval(
    data: DataOption,
    schema: SchemaOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: Annotated[Path, typer.Option("--out", help="Report JSON")] = Path("crossval.json"),
    folds: Annotated[Optional[int], typer.Option("--folds")] = None,
    repeats: Annotated[Optional[int], typer.Option("--repeats")] = None,
    k: Annotated[Optional[int], typer.Option("--k", help="Latent domains")] = None,
    truth: Annotated[Optional[Path], typer.Option("--truth", help="Needed for latent_sum outcomes")] = None,
    summary: Annotated[Optional[Path], typer.Option("--summary", help="Also write a mean/sd CSV")] = None,
    aggregate: AggregateOption = None,
    aggregate_file: AggregateFileOption = None,
    direction: DirectionOption = None,
):
    """Repeated arm-stratified K-fold comparison against the linear-Q baseline."""
    with command_guard("crossval"):
        run = RunConfig.load(
            config,
            {
                "seed": seed,
                "threads": _threads(threads),
                "out": str(out),
                "folds": folds,
                "repeats": repeats,
                "training.K": k,
                "direction": direction,
            }
            | _aggregate_overrides(aggregate, aggregate_file),
        )
        provenance = _echo_config(run, "crossval")
        dataset = load_dataset(data, schema)
        ground_truth = _load_truth(truth, dataset)
        report = crossval(
            dataset,
            run.folds,
            run.training,
            run.repeats,
            run.outcomes,
            run.direction,
            run.aggregate,
            ground_truth,
            threads=run.threads,
        )
        write_json(out, {"provenance": provenance, **report.model_dump()})
        frame = report.summary_frame()
        if summary is not None:
            frame.to_csv(summary, index=False, lineterminator="\n")
            write_manifest(summary, provenance)

        table = Table(title=f"Cross-validation ({run.repeats} x {run.folds} folds)")
        for column in frame.columns:
            table.add_column(column)
        for row in frame.itertuples(index=False):
            table.add_row(row.method, row.outcome, f"{row.mean:.4f}", f"{row.sd:.4f}")
        console.print(table)
        console.print(f"[green]Report saved to {out}[/green]")


def _parse_grid(text: Optional[str]) -> Optional[List[List[int]]]:
    if text is None:
        return None
    return [_parse_widths(part) for part in text.split(";") if part.strip()]


@app.command("tune")
def cmd_tune(
    data: DataOption,
    schema: SchemaOption,
    config: ConfigOption = None,
    seed: SeedOption = None,
    threads: ThreadsOption = None,
    out: Annotated[Path, typer.Option("--out", help="Report JSON")] = Path("tune.json"),
    folds: Annotated[Optional[int], typer.Option("--folds")] = None,
    repeats: Annotated[Optional[int], typer.Option("--repeats")] = None,
    hidden_grid: Annotated[Optional[str], typer.Option("--hidden-grid", help="e.g. '20,10;10'")] = None,
    iterations_grid: Annotated[Optional[str], typer.Option("--iterations-grid", help="e.g. '4,6'")] = None,
    truth: Annotated[Optional[Path], typer.Option("--truth")] = None,
    direction: DirectionOption = None,
):
    """Choose hidden widths and outer iterations by cross-validated value."""
    with command_guard("tune"):
        run = RunConfig.load(
            config,
            {
                "seed": seed,
                "threads": _threads(threads),
                "out": str(out),
                "folds": folds,
                "repeats": repeats,
                "direction": direction,
                "tune_grid.hidden": _parse_grid(hidden_grid),
                "tune_grid.outer_iterations": _parse_widths(iterations_grid),
            },
        )
        provenance = _echo_config(run, "tune")
        dataset = load_dataset(data, schema)
        ground_truth = _load_truth(truth, dataset)
        with _progress() as progress:
            task = progress.add_task(
                "Tuning", total=len(run.tune_grid.hidden) * len(run.tune_grid.outer_iterations)
            )
            report = tune(
                dataset,
                run.tune_grid,
                run.folds,
                run.training,
                run.repeats,
                run.outcomes[0],
                run.direction,
                run.aggregate,
                ground_truth,
                threads=run.threads,
                on_candidate=lambda _: progress.advance(task),
            )
        write_json(out, {"provenance": provenance, **report.model_dump()})

        table = Table(title=f"Tuning on {report.outcome}")
        table.add_column("Hidden")
        table.add_column("Outer iterations", justify="right")
        table.add_column("Mean", justify="right")
        table.add_column("SD", justify="right")
        for candidate in report.candidates:
            marker = " *" if candidate == report.best else ""
            table.add_row(
                str(candidate.hidden) + marker,
                str(candidate.outer_iterations),
                f"{candidate.mean:.4f}",
                f"{candidate.sd:.4f}",
            )
        console.print(table)
        console.print(f"[green]Best: hidden={report.best.hidden}, outer_iterations={report.best.outer_iterations}[/green]")


if __name__ == "__main__":
    app()
