import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import orjson
from pydantic import BaseModel, Field, ValidationError

from errors import ModelFileError, SchemaError, error_handler
from latent_model.aggregate import AggregateSpec
from latent_model.measurement import ContinuousScaler, MeasurementParams
from latent_model.trainer import FittedModel, ObjectiveRecord, TrainingConfig
from latent_model.transition import TransitionParams
from settings import ARTIFACT_VERSION
from trial_data.dataset_io import read_json, write_json
from trial_data.schema import Anchor, ItemSchema, ItemSpec

logger = logging.getLogger(__name__)


class ScalerPayload(BaseModel):
    mean: Dict[str, float]
    scale: Dict[str, float]


class ModelFile(BaseModel):
    """On-disk layout of a fitted model."""

    version: str = ARTIFACT_VERSION
    items: List[ItemSpec]
    covariates: List[str]
    K: int = Field(..., ge=1)
    measurement: List[Dict[str, Any]]
    transition: Dict[str, Any]
    aggregate: AggregateSpec
    anchors: List[Anchor]
    config: TrainingConfig
    objective_log: List[ObjectiveRecord]
    scaler: Optional[ScalerPayload] = None
    provenance: Optional[Dict[str, Any]] = None


def model_to_file(model: FittedModel, provenance: Optional[Dict[str, Any]] = None) -> ModelFile:
    return ModelFile(
        items=list(model.schema.items),
        covariates=list(model.covariate_names),
        K=model.K,
        measurement=model.measurement.to_payload(),
        transition=model.transition.to_payload(),
        aggregate=model.aggregate,
        anchors=model.anchors,
        config=model.config,
        objective_log=model.objective_log,
        scaler=ScalerPayload(mean=model.scaler.mean, scale=model.scaler.scale) if model.scaler else None,
        provenance=provenance,
    )


def model_from_file(payload: ModelFile) -> FittedModel:
    schema = ItemSchema(items=payload.items)
    try:
        measurement = MeasurementParams.from_payload(schema, payload.K, payload.measurement)
        transition = TransitionParams.from_payload(payload.transition)
    except (KeyError, ValueError, SchemaError) as e:
        raise ModelFileError(f"model parameters are malformed: {e}") from None
    if transition.K != payload.K or transition.input_dim != len(payload.covariates) + payload.K:
        raise ModelFileError("transition network dimensions do not match K and the covariates")
    if payload.aggregate.K != payload.K:
        raise ModelFileError(f"aggregate has {payload.aggregate.K} weights for K={payload.K}")
    scaler = ContinuousScaler(mean=payload.scaler.mean, scale=payload.scaler.scale) if payload.scaler else None
    return FittedModel(
        schema=schema,
        covariate_names=tuple(payload.covariates),
        K=payload.K,
        measurement=measurement,
        transition=transition,
        aggregate=payload.aggregate,
        anchors=payload.anchors,
        config=payload.config,
        objective_log=payload.objective_log,
        scaler=scaler,
    )


def save_model(model: FittedModel, path: str | Path, provenance: Optional[Dict[str, Any]] = None) -> None:
    write_json(path, model_to_file(model, provenance).model_dump(mode="json"))
    logger.info(f"Model saved to {path}")


def load_model(path: str | Path) -> FittedModel:
    try:
        payload = ModelFile.model_validate(read_json(path))
    except FileNotFoundError:
        raise ModelFileError(f"model file not found: {path}") from None
    except orjson.JSONDecodeError as e:
        raise ModelFileError(f"model file {path} is not valid JSON: {e}") from None
    except ValidationError as e:
        logger.error(f"Model validation error for {path}: {str(e)}")
        raise ModelFileError(f"model file {path} is corrupted: {e}") from None
    if not all(np.isfinite(r.objective) for r in payload.objective_log):
        raise ModelFileError(f"model file {path} holds a non-finite objective log")
    return model_from_file(payload)


class ModelStore:
    """Named fitted models kept as JSON files under one directory."""

    def __init__(self, model_dir: str = "models"):
        self.model_dir = Path(model_dir)

    def path_for(self, name: str) -> Path:
        return self.model_dir / f"{name}.json"

    def save_model(self, name: str, model: FittedModel, provenance: Optional[Dict[str, Any]] = None) -> Path:
        with error_handler("Model Save"):
            path = self.path_for(name)
            save_model(model, path, provenance)
            return path

    def load_model(self, name: str) -> Optional[FittedModel]:
        if not self.path_for(name).exists():
            return None
        with error_handler("Model Load"):
            return load_model(self.path_for(name))

    def list_models(self) -> List[str]:
        if not os.path.isdir(self.model_dir):
            return []
        return sorted(p.stem for p in self.model_dir.glob("*.json"))

    def delete_model(self, name: str) -> bool:
        path = self.path_for(name)
        if path.exists():
            path.unlink()
            logger.info(f"Deleted model {name}")
            return True
        return False
