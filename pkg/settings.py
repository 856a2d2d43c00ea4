from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

ARTIFACT_VERSION = "0.3.0"


class Settings(BaseSettings):
    """Process-level settings, read from LATENTITR_* variables and `.env`."""

    model_config = SettingsConfigDict(env_prefix="LATENTITR_", env_file=".env", extra="ignore")

    log_level: str = Field("INFO", description="Root log level")
    log_file: Optional[str] = Field("latentitr.log", description="Log file path; empty disables it")
    threads: int = Field(1, ge=1, description="Default worker cap")
    model_dir: str = Field("models", description="Directory used by the model store")
    artifact_version: str = ARTIFACT_VERSION


def get_settings() -> Settings:
    return Settings()
