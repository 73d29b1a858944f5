"""Runtime settings for plmcast (environment / .env driven)."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import structlog
from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

logger = structlog.get_logger()


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="PLMCAST_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    log_level: str = "INFO"
    log_json: bool = False
    weights_dir: Path | None = None
    offline: bool = True
    num_threads: int = 1
    device: str = "cpu"

    def resolve_weights(self, name: str) -> str:
        """Resolve a pretrained checkpoint name to a local directory when one exists.

        ``weights_dir/<name>`` wins over the bare name; the bare name is handed to
        ``from_pretrained`` untouched, which reads the local Hugging Face cache.
        """
        candidate = Path(name)
        if candidate.is_dir():
            return str(candidate)
        if self.weights_dir is not None and (self.weights_dir / name).is_dir():
            return str(self.weights_dir / name)
        return name


@lru_cache
def get_settings() -> Settings:
    return Settings()
