from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    seed: int | None = None  # ZEROS_SEED overrides every config seed
    run_root: Path = Path("runs")
    log_level: str = "INFO"
    precision: Literal["double", "single"] = "double"

    class Config:
        env_file = ".env.local"
        env_prefix = "ZEROS_"
        extra = "ignore"


@lru_cache
def get_settings() -> Settings:
    return Settings()
