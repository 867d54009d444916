from __future__ import annotations
from functools import lru_cache
from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class LogFormat(str, Enum):
    RICH = "rich"
    PLAIN = "plain"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="morphcl_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # IDX directory (MORPHCL_DATA); the synthetic digits are used when unset or empty
    data: Optional[Path] = Field(default=None)

    # Artifacts
    out_dir: Path = Field(default=Path("runs"))
    registry_name: str = Field(default="registry.db")

    # Logging
    log_level: str = Field(default="INFO")
    log_format: LogFormat = Field(default=LogFormat.RICH)

    # Sweep pool size; 1 runs inline
    workers: int = Field(default=1, ge=1)


@lru_cache
def get_settings() -> Settings:
    return Settings()


settings = get_settings()
