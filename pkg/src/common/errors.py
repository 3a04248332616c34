from typing import Any, Dict, Iterable, Optional, Sequence


class HirsError(ValueError):
    """Base class for every error the pipeline raises on purpose."""

    kind = "hirs_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        payload = {"error": self.kind, "message": self.message}
        payload.update({k: v for k, v in self.details.items() if v is not None})
        return payload


class ShapeError(HirsError):
    kind = "shape_error"

    def __init__(self, op: str, left: Sequence[int], right: Sequence[int]):
        super().__init__(
            f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}",
            op=op,
            left=list(left),
            right=list(right),
        )


class NonFiniteError(HirsError):
    kind = "non_finite"

    def __init__(self, op: str, shape: Sequence[int]):
        super().__init__(
            f"{op}: produced NaN or Inf in tensor of shape {tuple(shape)}",
            op=op,
            shape=list(shape),
        )


class ParseError(HirsError):
    kind = "parse_error"

    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}", path=path, line=line)


class ConfigError(HirsError):
    kind = "config_error"

    def __init__(self, message: str, valid_keys: Optional[Iterable[str]] = None):
        keys = sorted(valid_keys) if valid_keys is not None else None
        if keys:
            message = f"{message} (valid keys: {', '.join(keys)})"
        super().__init__(message, valid_keys=keys)


class VocabularyError(HirsError):
    kind = "vocabulary_error"


class GradcheckError(HirsError):
    kind = "gradcheck_failed"


class OracleMismatchError(HirsError):
    kind = "oracle_mismatch"


class TrainingDivergedError(HirsError):
    kind = "training_diverged"

    def __init__(self, component: str, epoch: int, batch: int):
        super().__init__(
            f"loss component '{component}' became non-finite "
            f"(epoch {epoch}, batch {batch})",
            component=component,
            epoch=epoch,
            batch=batch,
        )


class AblationDirectionError(HirsError):
    kind = "ablation_direction"


class ArtifactError(HirsError):
    kind = "artifact_error"
