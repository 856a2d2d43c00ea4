from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DataValidationError, SchemaError

ARMS = (-1, 1)
RESERVED_COLUMNS = ("treatment", "propensity")


class ItemSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1, description="Item name, unique within the schema")
    kind: Literal["discrete", "continuous"] = Field(..., description="Measurement scale")
    num_categories: Optional[int] = Field(None, description="Category count l_j + 1 for discrete items")

    @model_validator(mode="after")
    def _check_categories(self):
        if self.kind == "discrete":
            if self.num_categories is None or self.num_categories < 2:
                raise ValueError(f"discrete item '{self.name}' needs num_categories >= 2")
        elif self.num_categories is not None:
            raise ValueError(f"continuous item '{self.name}' must not set num_categories")
        return self

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    @property
    def width(self) -> int:
        """Number of decoder outputs: categories for discrete items, 1 otherwise."""
        return self.num_categories if self.is_discrete else 1


class ItemSchema(BaseModel):
    model_config = ConfigDict(frozen=True)

    items: List[ItemSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_names(self):
        names = [item.name for item in self.items]
        if len(set(names)) != len(names):
            raise ValueError(f"item names must be unique, got {names}")
        return self

    def __len__(self) -> int:
        return len(self.items)

    @property
    def names(self) -> List[str]:
        return [item.name for item in self.items]

    @property
    def discrete_indices(self) -> List[int]:
        return [j for j, item in enumerate(self.items) if item.is_discrete]

    @property
    def continuous_indices(self) -> List[int]:
        return [j for j, item in enumerate(self.items) if not item.is_discrete]

    def index_of(self, item: int | str) -> int:
        if isinstance(item, int):
            if not 0 <= item < len(self.items):
                raise SchemaError(f"item index {item} out of range for {len(self.items)} items")
            return item
        try:
            return self.names.index(item)
        except ValueError:
            raise SchemaError(f"unknown item '{item}'") from None


class Anchor(BaseModel):
    """Fixes the loading direction of one item on one latent domain."""

    model_config = ConfigDict(frozen=True)

    domain: int = Field(..., ge=0)
    item: int | str
    direction: Literal["+", "-"] = "+"


class SchemaFile(BaseModel):
    """On-disk schema: items, covariate names and optional anchor suggestions."""

    items: List[ItemSpec]
    covariates: List[str] = Field(default_factory=list)
    anchors: List[Anchor] = Field(default_factory=list)
    provenance: Optional[Dict[str, Any]] = None

    @model_validator(mode="after")
    def _check_columns(self):
        if not self.items:
            raise ValueError("schema must declare at least one item")
        ItemSchema(items=self.items)
        columns = data_columns(ItemSchema(items=self.items), self.covariates)
        if len(set(columns)) != len(columns):
            raise ValueError("item, covariate and reserved column names collide")
        return self

    @property
    def item_schema(self) -> ItemSchema:
        return ItemSchema(items=self.items)


class SubjectRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    y0: List[float]
    x: List[float]
    a: Literal[-1, 1]
    propensity: float = Field(..., gt=0.0, lt=1.0)
    y1: List[float]


def data_columns(schema: ItemSchema, covariate_names: Sequence[str]) -> List[str]:
    return (
        [f"y0_{name}" for name in schema.names]
        + list(covariate_names)
        + list(RESERVED_COLUMNS)
        + [f"y1_{name}" for name in schema.names]
    )


def check_items(schema: ItemSchema, values: np.ndarray, prefix: str) -> None:
    """Raise on the first cell that is missing or outside its item's range."""
    for j, item in enumerate(schema.items):
        column = values[:, j]
        bad = ~np.isfinite(column)
        if item.is_discrete:
            with np.errstate(invalid="ignore"):
                bad |= (column != np.round(column)) | (column < 0) | (column > item.num_categories - 1)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataValidationError(
                f"value {column[row]!r} invalid for {item.kind} item '{item.name}'"
                + (f" with {item.num_categories} categories" if item.is_discrete else ""),
                row=row,
                column=f"{prefix}{item.name}",
            )


def _frozen(array: Any, dtype, shape: tuple) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated, immutable trial data held as column arrays."""

    schema: ItemSchema
    covariate_names: tuple
    y0: np.ndarray
    x: np.ndarray
    treatment: np.ndarray
    propensity: np.ndarray
    y1: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(np.asarray(self.treatment).reshape(-1))
        J, P = len(self.schema), len(self.covariate_names)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "y0", _frozen(self.y0, np.float64, (n, J)))
        object.__setattr__(self, "y1", _frozen(self.y1, np.float64, (n, J)))
        object.__setattr__(self, "x", _frozen(self.x, np.float64, (n, P)))
        object.__setattr__(self, "propensity", _frozen(self.propensity, np.float64, (n,)))
        treatment = np.asarray(self.treatment).reshape(-1)
        bad = ~np.isin(treatment, ARMS)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataValidationError(f"treatment must be -1 or 1, got {treatment[row]!r}", row=row, column="treatment")
        object.__setattr__(self, "treatment", _frozen(treatment, np.int64, (n,)))

        check_items(self.schema, self.y0, "y0_")
        check_items(self.schema, self.y1, "y1_")
        bad_x = ~np.isfinite(self.x)
        if bad_x.any():
            row, col = (int(v) for v in np.argwhere(bad_x)[0])
            raise DataValidationError("covariate must be finite", row=row, column=self.covariate_names[col])
        bad_p = ~((self.propensity > 0.0) & (self.propensity < 1.0))
        if bad_p.any():
            row = int(np.flatnonzero(bad_p)[0])
            raise DataValidationError(
                f"propensity {self.propensity[row]!r} outside (0, 1)", row=row, column="propensity"
            )

    @classmethod
    def from_records(
        cls, schema: ItemSchema, covariate_names: Sequence[str], records: Iterable[SubjectRecord]
    ) -> "Dataset":
        records = list(records)
        J, P = len(schema), len(covariate_names)
        for i, record in enumerate(records):
            if len(record.y0) != J or len(record.y1) != J:
                raise DataValidationError(f"expected {J} item values", row=i, column="y0/y1")
            if len(record.x) != P:
                raise DataValidationError(f"expected {P} covariates", row=i, column="x")
        return cls(
            schema=schema,
            covariate_names=tuple(covariate_names),
            y0=[r.y0 for r in records] if records else np.zeros((0, J)),
            x=[r.x for r in records] if records else np.zeros((0, P)),
            treatment=[r.a for r in records],
            propensity=[r.propensity for r in records],
            y1=[r.y1 for r in records] if records else np.zeros((0, J)),
        )

    @property
    def n(self) -> int:
        return int(self.treatment.shape[0])

    @property
    def weights(self) -> np.ndarray:
        """Inverse-probability weights 1 / P(A_i | X_i)."""
        return 1.0 / self.propensity

    def arm_counts(self) -> Dict[int, int]:
        return {arm: int(np.sum(self.treatment == arm)) for arm in ARMS}

    def require_both_arms(self) -> None:
        counts = self.arm_counts()
        missing = [arm for arm, count in counts.items() if count == 0]
        if missing:
            raise DataValidationError(f"training data has no subject in arm(s) {missing}", column="treatment")

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            covariate_names=self.covariate_names,
            y0=self.y0[idx],
            x=self.x[idx],
            treatment=self.treatment[idx],
            propensity=self.propensity[idx],
            y1=self.y1[idx],
            metadata=dict(self.metadata),
        )

    def with_items(self, y0: np.ndarray, y1: np.ndarray, schema: Optional[ItemSchema] = None) -> "Dataset":
        return Dataset(
            schema=schema or self.schema,
            covariate_names=self.covariate_names,
            y0=y0,
            x=self.x,
            treatment=self.treatment,
            propensity=self.propensity,
            y1=y1,
            metadata=dict(self.metadata),
        )

    def item_columns(self, names: Sequence[str], phase: Literal["y0", "y1"] = "y1") -> np.ndarray:
        values = self.y1 if phase == "y1" else self.y0
        return values[:, [self.schema.index_of(name) for name in names]]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.schema == other.schema
            and self.covariate_names == other.covariate_names
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("y0", "x", "treatment", "propensity", "y1")
            )
        )
