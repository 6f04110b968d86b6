from pathlib import Path
from typing import Literal

from pydantic import HttpUrl, computed_field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing_extensions import Self

ROOT_DIR = Path(__file__).resolve().parents[3]
ENV_FILE = ROOT_DIR / ".env"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=ENV_FILE,
        env_ignore_empty=True,
        extra="ignore",
    )
    API_V1_STR: str = "/api/v1"
    PROJECT_NAME: str = "MCD Dissemination Simulator"
    ENVIRONMENT: Literal["local", "staging", "production"] = "local"
    SENTRY_DSN: HttpUrl | None = None
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    # Where `run`/`sweep` write CSV and plot files when --out is not given
    OUTPUT_DIR: Path = Path("results")
    # Process pool size for sweeps; 1 runs every point in-process
    SWEEP_WORKERS: int = 1
    # Upper bound on trace records kept in memory for a single run
    TRACE_MAX_RECORDS: int = 2_000_000

    @computed_field  # type: ignore[prop-decorator]
    @property
    def sentry_enabled(self) -> bool:
        return bool(self.SENTRY_DSN) and self.ENVIRONMENT != "local"

    @model_validator(mode="after")
    def _check_worker_count(self) -> Self:
        if self.SWEEP_WORKERS < 1:
            raise ValueError("SWEEP_WORKERS must be at least 1")
        if self.TRACE_MAX_RECORDS < 1:
            raise ValueError("TRACE_MAX_RECORDS must be at least 1")
        return self


settings = Settings()
