import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Type, TypeVar

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ValidationError

from src.common.errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

DEFAULT_OUT_DIR = "runs"
DEFAULT_CACHE_DIR = ".cache"


def get_out_root() -> Path:
    return Path(os.getenv("HIRS_OUT_DIR", DEFAULT_OUT_DIR))


def get_cache_dir() -> Path:
    return Path(os.getenv("HIRS_CACHE_DIR", DEFAULT_CACHE_DIR))


def get_db_url() -> str:
    url = os.getenv("HIRS_DB_URL")
    if url:
        return url
    return f"sqlite:///{get_out_root() / 'ledger.db'}"


def read_kv_file(path: str | Path) -> Dict[str, str]:
    """Parses a flat key=value file; comments and blank lines are ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"{path}: keys without a value: {', '.join(missing)}")
    return {key: value for key, value in values.items() if value is not None}


def parse_cli_overrides(args: List[str]) -> Dict[str, str]:
    """Turns trailing `--key value` / `--key=value` arguments into config overrides."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(args):
        token = args[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument '{token}', expected --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override --{key} is missing its value")
            value = args[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def build_model(model_cls: Type[ModelT], values: Mapping[str, Any]) -> ModelT:
    """Validates values into model_cls, turning pydantic failures into ConfigError."""
    valid = set(model_cls.model_fields)
    unknown = sorted(set(values) - valid)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", valid_keys=valid)
    try:
        return model_cls.model_validate(dict(values))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid {model_cls.__name__}: {problems}", valid_keys=valid) from None


def config_hash(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def artifact_header(subcommand: str, cfg_hash: str) -> str:
    return f"# hirs {subcommand} config_hash={cfg_hash}"
