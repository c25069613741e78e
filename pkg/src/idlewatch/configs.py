import logging
import os

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field

# Load environment variables
load_dotenv()


class Settings(BaseModel):
    """Runtime defaults, overridable through the environment or a .env file."""

    model_config = ConfigDict(frozen=True)

    trials: int = Field(100_000, ge=1)
    full_scale_trials: int = Field(10_000_000, ge=1)
    far_run_cap: int = Field(1_000_000, ge=1)
    cadd_run_cap: int = Field(1_000_000, ge=1)
    glr_window: int = Field(32, ge=1)
    workers: int = Field(1, ge=1)
    results_dir: str = "results"
    log_level: str = "INFO"


def load_settings() -> Settings:
    return Settings(
        trials=int(os.getenv("IDLEWATCH_TRIALS", 100_000)),
        full_scale_trials=int(os.getenv("IDLEWATCH_FULL_SCALE_TRIALS", 10_000_000)),
        far_run_cap=int(os.getenv("IDLEWATCH_FAR_RUN_CAP", 1_000_000)),
        cadd_run_cap=int(os.getenv("IDLEWATCH_CADD_RUN_CAP", 1_000_000)),
        glr_window=int(os.getenv("IDLEWATCH_GLR_WINDOW", 32)),
        workers=int(os.getenv("IDLEWATCH_WORKERS", 1)),
        results_dir=os.getenv("IDLEWATCH_RESULTS_DIR", "results"),
        log_level=os.getenv("IDLEWATCH_LOG_LEVEL", "INFO").upper(),
    )


settings = load_settings()


def configure_logging(level: str = settings.log_level) -> None:
    """Entry points call this once; library modules only create loggers."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
