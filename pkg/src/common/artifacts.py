"""
Run artifacts: JSON-lines logs with a header record, JSON reports, and the HIRSCKPT1 binary
checkpoint (magic line, one JSON header line, raw little-endian float64 arrays).
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from src.common.errors import ArtifactError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HIRSCKPT1"
CHECKPOINT_VERSION = 1


def dumps(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def header_record(subcommand: str, cfg_hash: str) -> Dict[str, str]:
    return {"hirs": subcommand, "config_hash": cfg_hash}


class JsonlWriter:
    """Append-only JSON-lines file whose first record names the producer."""

    def __init__(self, path: str | Path, subcommand: str, cfg_hash: str, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if append and self.path.exists():
            return
        self.path.write_text(dumps(header_record(subcommand, cfg_hash)) + "\n", encoding="utf-8")

    def write(self, record: Mapping[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(dumps(dict(record)) + "\n")


def read_jsonl(path: str | Path) -> Tuple[Dict[str, Any], list]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ArtifactError(f"{path} is empty")
    records = [json.loads(line) for line in lines]
    return records[0], records[1:]


def write_report(path: str | Path, subcommand: str, cfg_hash: str, body: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"header": header_record(subcommand, cfg_hash), **body}
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def save_arrays(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    subcommand: str,
    cfg_hash: str,
    header: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Writes arrays in the given order; identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = [{"name": name, "shape": list(np.shape(value))} for name, value in arrays.items()]
    meta = {
        "version": CHECKPOINT_VERSION,
        **header_record(subcommand, cfg_hash),
        "manifest": manifest,
        **(header or {}),
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(dumps(meta).encode("utf-8") + b"\n")
        for value in arrays.values():
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return path


def load_arrays(path: str | Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ArtifactError(f"{path} is not a {CHECKPOINT_MAGIC.decode()} checkpoint")
        meta = json.loads(f.readline().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ArtifactError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays: Dict[str, np.ndarray] = {}
        for entry in meta["manifest"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise ArtifactError(f"{path}: truncated array '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, meta
