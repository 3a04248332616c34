import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field

from src.common.errors import ConfigError
from src.common.settings import build_model, config_hash, read_kv_file
from src.services.data import DataSchema
from src.services.trainer import TrainConfig

logger = logging.getLogger(__name__)


class RunOptions(BaseModel):
    """Paths and subcommand options that are neither model nor data settings."""

    model_config = ConfigDict(extra="forbid")

    out_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    resume_from: Optional[str] = None
    dataset_path: Optional[str] = None
    spec_path: Optional[str] = None
    use_cache: bool = True
    flags: str = "no_mi,no_l0"
    workers: int = Field(1, ge=1)
    sweep_param: str = "k"
    sweep_values: Optional[str] = None
    bench_ks: str = "5,10,20,40,60"
    bench_ms: Optional[str] = None
    bench_samples: int = Field(512, ge=1)
    bench_repeats: int = Field(1, ge=1)
    gradcheck_seeds: int = Field(20, ge=1)
    gradcheck_tolerance: float = Field(1e-4, gt=0)
    dump_samples: int = Field(5, ge=1)
    synth_samples: Optional[int] = Field(None, ge=1)
    synth_seeds: str = "0,1,2"
    strict: bool = True


def parse_list(text: Optional[str], kind=float) -> List:
    if not text:
        return []
    return [kind(token) for token in text.split(",") if token.strip()]


@dataclass
class RunConfig:
    train: TrainConfig
    schema: DataSchema
    options: RunOptions
    hash: str

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> Dict[str, dict]:
        return {
            "train": self.train.model_dump(),
            "schema": self.schema.model_dump(),
            "options": self.options.model_dump(),
        }


_SECTIONS = (("train", TrainConfig), ("schema", DataSchema), ("options", RunOptions))


def valid_keys() -> List[str]:
    return sorted(key for _, model in _SECTIONS for key in model.model_fields)


def build_run_config(values: Mapping[str, str]) -> RunConfig:
    """Routes each flat key to the model that owns it."""
    unknown = sorted(set(values) - set(valid_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", valid_keys=valid_keys())
    parts = {}
    for section, model in _SECTIONS:
        owned = {k: v for k, v in values.items() if k in model.model_fields}
        parts[section] = build_model(model, owned)
    payload = {section: parts[section].model_dump() for section, _ in _SECTIONS}
    return RunConfig(parts["train"], parts["schema"], parts["options"], config_hash(payload))


def load_run_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    values: Dict[str, str] = dict(read_kv_file(path)) if path else {}
    values.update(overrides or {})
    if seed is not None:
        values["seed"] = str(seed)
    cfg = build_run_config(values)
    logger.info(f"Loaded config{f' from {path}' if path else ''}: hash {cfg.hash[:12]}")
    return cfg
