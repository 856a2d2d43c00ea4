import logging
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import orjson
import pandas as pd
from pydantic import ValidationError

from errors import DataValidationError, SchemaError
from trial_data.schema import Dataset, ItemSchema, SchemaFile, check_items, data_columns

logger = logging.getLogger(__name__)

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def write_json(path: str | Path, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=JSON_OPTIONS) + b"\n")


def read_json(path: str | Path) -> Any:
    return orjson.loads(Path(path).read_bytes())


def load_schema(path: str | Path) -> SchemaFile:
    try:
        return SchemaFile.model_validate(read_json(path))
    except FileNotFoundError:
        raise SchemaError(f"schema file not found: {path}") from None
    except orjson.JSONDecodeError as e:
        raise SchemaError(f"schema file {path} is not valid JSON: {e}") from None
    except ValidationError as e:
        raise SchemaError(f"schema file {path} is invalid: {e}") from None


def save_schema(schema_file: SchemaFile, path: str | Path) -> None:
    write_json(path, schema_file.model_dump(mode="json", exclude_none=True))


def _parse_cell(text: str, row: int, column: str) -> float:
    if text.strip() == "":
        raise DataValidationError("missing value", row=row, column=column)
    try:
        return float(text)
    except ValueError:
        raise DataValidationError(f"non-numeric value {text!r}", row=row, column=column) from None


def _parse_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    return np.array([_parse_cell(text, row, column) for row, text in enumerate(frame[column])], dtype=np.float64)


def load_dataset(
    path: str | Path,
    schema_path: str | Path,
    constant_propensity: Optional[float] = None,
) -> Dataset:
    """Read a comma-delimited trial file and validate every cell against the schema.

    When the file has no `propensity` column and `constant_propensity` is given,
    every record receives that value.
    """
    schema_file = load_schema(schema_path)
    schema = schema_file.item_schema
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataValidationError(f"data file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"data file {path} has no header row") from None

    if "propensity" not in frame.columns and constant_propensity is not None:
        frame["propensity"] = repr(float(constant_propensity))

    expected = data_columns(schema, schema_file.covariates)
    for column in expected:
        if column not in frame.columns:
            raise DataValidationError("missing column", column=column)
    extra = [c for c in frame.columns if c not in expected]
    if extra:
        logger.warning(f"Ignoring unknown columns in {path}: {extra}")

    n = len(frame)
    parsed: Dict[str, np.ndarray] = {column: _parse_column(frame, column) for column in expected}

    def stack(columns):
        return np.column_stack([parsed[c] for c in columns]) if columns else np.zeros((n, 0))

    dataset = Dataset(
        schema=schema,
        covariate_names=tuple(schema_file.covariates),
        y0=stack([f"y0_{name}" for name in schema.names]),
        x=stack(schema_file.covariates),
        treatment=parsed["treatment"],
        propensity=parsed["propensity"],
        y1=stack([f"y1_{name}" for name in schema.names]),
        metadata={"anchors": [a.model_dump() for a in schema_file.anchors]},
    )
    logger.info(f"Loaded {dataset.n} records from {path} ({len(schema)} items, {len(schema_file.covariates)} covariates)")
    return dataset


def _format_items(schema: ItemSchema, values: np.ndarray, j: int) -> list:
    if schema.items[j].is_discrete:
        return [str(int(v)) for v in values[:, j]]
    return [repr(float(v)) for v in values[:, j]]


def dataset_frame(ds: Dataset) -> pd.DataFrame:
    """Render a dataset as text cells; floats use the shortest round-trip form."""
    columns: Dict[str, list] = {}
    for j, name in enumerate(ds.schema.names):
        columns[f"y0_{name}"] = _format_items(ds.schema, ds.y0, j)
    for p, name in enumerate(ds.covariate_names):
        columns[name] = [repr(float(v)) for v in ds.x[:, p]]
    columns["treatment"] = [str(int(a)) for a in ds.treatment]
    columns["propensity"] = [repr(float(p)) for p in ds.propensity]
    for j, name in enumerate(ds.schema.names):
        columns[f"y1_{name}"] = _format_items(ds.schema, ds.y1, j)
    return pd.DataFrame(columns, columns=data_columns(ds.schema, ds.covariate_names), dtype=object)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(ds).to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.info(f"Saved {ds.n} records to {path}")


def load_features(path: str | Path, schema_path: str | Path) -> tuple:
    """Pre-treatment items and covariates only, for files without outcomes or assignments."""
    schema_file = load_schema(schema_path)
    schema = schema_file.item_schema
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataValidationError(f"data file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"data file {path} has no header row") from None
    items = [f"y0_{name}" for name in schema.names]
    for column in items + list(schema_file.covariates):
        if column not in frame.columns:
            raise DataValidationError("missing column", column=column)
    n = len(frame)
    Y0 = np.column_stack([_parse_column(frame, c) for c in items]) if items else np.zeros((n, 0))
    Y0 = Y0.reshape(n, len(items))
    check_items(schema, Y0, "y0_")
    X = np.zeros((n, len(schema_file.covariates)))
    for p, column in enumerate(schema_file.covariates):
        X[:, p] = _parse_column(frame, column)
    bad = ~np.isfinite(X)
    if bad.any():
        row, col = (int(v) for v in np.argwhere(bad)[0])
        raise DataValidationError("covariate must be finite", row=row, column=schema_file.covariates[col])
    return schema_file, Y0, X


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_manifest(path: str | Path, provenance: Dict[str, Any]) -> Path:
    """Sibling `<file>.manifest.json` recording how a tabular output was produced."""
    target = manifest_path(path)
    write_json(target, {"file": Path(path).name, "provenance": provenance})
    return target
