import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from latent_model.aggregate import AggregateSource
from latent_model.trainer import TrainingConfig
from policy_evaluation.crossval import TuneGrid
from policy_evaluation.value import Direction, OutcomeSpec
from settings import ARTIFACT_VERSION
from trial_data.dataset_io import read_json
from trial_simulator.simulator import SimConfig

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """Effective configuration of one command: JSON config file merged with flag overrides."""

    training: TrainingConfig = Field(default_factory=TrainingConfig)
    simulation: SimConfig = Field(default_factory=SimConfig)
    aggregate: AggregateSource = Field(default_factory=AggregateSource)
    direction: Direction = "minimize"
    outcomes: List[OutcomeSpec] = Field(default_factory=lambda: [OutcomeSpec()])
    folds: int = Field(4, ge=2)
    repeats: int = Field(1, ge=1)
    tune_grid: TuneGrid = Field(default_factory=TuneGrid)
    seed: Optional[int] = Field(None, ge=0, description="Top-level seed; copied into training and simulation")
    threads: int = Field(1, ge=1)
    out: Optional[str] = None

    @classmethod
    def load(cls, config_path: Optional[str | Path] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Merge a JSON config with dotted-key overrides (flags win); unset flags are None and skipped."""
        payload: Dict[str, Any] = read_json(config_path) if config_path else {}
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            target = payload
            *parents, leaf = key.split(".")
            for parent in parents:
                target = target.setdefault(parent, {})
            target[leaf] = value
        if payload.get("seed") is not None:
            payload.setdefault("training", {})["seed"] = payload["seed"]
            payload.setdefault("simulation", {})["seed"] = payload["seed"]
        config = cls.model_validate(payload)
        logger.debug(f"Effective run config: {config.model_dump()}")
        return config

    def provenance(self, command: str) -> Dict[str, Any]:
        # threads and output paths do not change results
        config = self.model_dump(mode="json", exclude={"threads", "out"})
        return {"command": command, "artifact_version": ARTIFACT_VERSION, "config": config}
