import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

# Load environment variables from .env file if it exists
load_dotenv()

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

M = TypeVar("M", bound=BaseModel)


class Settings(BaseSettings):
    """Process-wide settings, read from MARGINKD_* environment variables or .env."""

    model_config = SettingsConfigDict(env_prefix="MARGINKD_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    log_format: str = LOG_FORMAT
    output_dir: Path = Path("./runs")
    seed: int = 0
    workers: int = 1


settings = Settings()


def setup_logging(level: Optional[str] = None) -> None:
    """Configure root logging once; later calls only adjust the level."""
    resolved = (level or settings.log_level).upper()
    logging.basicConfig(level=resolved, format=settings.log_format)
    logging.getLogger().setLevel(resolved)


def read_kv_file(path: Path) -> Dict[str, str]:
    """Parse a flat key=value config file. Blank values are dropped."""
    if not path.exists():
        raise FileNotFoundError(f"Config file not found at: {path}")
    return {k: v for k, v in dotenv_values(path).items() if v is not None and v != ""}


def resolve(model: Type[M], file_values: Mapping[str, Any], overrides: Mapping[str, Any]) -> M:
    """Layer defaults < config file < explicit overrides and validate.

    Keys unknown to `model` are ignored so one config file can feed several
    commands.
    """
    fields = set(model.model_fields)
    aliases = {f.alias for f in model.model_fields.values() if f.alias}
    merged: Dict[str, Any] = {}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            if key in fields or key in aliases:
                merged[key] = value
    try:
        return model.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e


def canonical_json(payload: Mapping[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]
