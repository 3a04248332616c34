import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.common.errors import GradcheckError
from src.common.numerics import DiffNode, Tensor, backward, parameter

logger = logging.getLogger(__name__)

LossFn = Callable[[Dict[str, DiffNode]], DiffNode]


@dataclass
class GradcheckReport:
    max_rel_error: float
    tolerance: float
    worst_param: Optional[str] = None
    worst_index: Tuple[int, ...] = ()
    analytic: float = 0.0
    numeric: float = 0.0
    per_param: Dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index),
            "analytic": self.analytic,
            "numeric": self.numeric,
            "per_param": self.per_param,
            "coords_checked": self.coords_checked,
        }

    def raise_if_failed(self) -> None:
        if not self.passed:
            raise GradcheckError(
                f"max relative error {self.max_rel_error:.3e} exceeds {self.tolerance:.1e} "
                f"at {self.worst_param}{list(self.worst_index)}",
                worst_param=self.worst_param,
                worst_index=list(self.worst_index),
                max_rel_error=self.max_rel_error,
            )


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(fn: LossFn, arrays: Mapping[str, Tensor]) -> float:
    nodes = {name: parameter(value, name) for name, value in arrays.items()}
    return fn(nodes).item()


def gradcheck(
    fn: LossFn,
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckReport:
    """
    Compares backward() against central finite differences.

    `fn` must rebuild the loss from the parameter nodes it is given and be deterministic, so any
    noise (gates, dropout, pair draws) has to be drawn from a generator seeded inside `fn`.
    """
    arrays = {name: np.array(value, dtype=np.float64, copy=True) for name, value in params.items()}
    nodes = {name: parameter(value, name) for name, value in arrays.items()}
    grads = backward(fn(nodes), nodes)
    rng = rng or np.random.default_rng(0)

    report = GradcheckReport(max_rel_error=0.0, tolerance=tolerance)
    for name, value in arrays.items():
        coords: List[Tuple[int, ...]] = list(np.ndindex(value.shape))
        if max_coords_per_param is not None and len(coords) > max_coords_per_param:
            picks = rng.choice(len(coords), size=max_coords_per_param, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        worst_here = 0.0
        for index in coords:
            original = value[index]
            value[index] = original + step
            plus = _evaluate(fn, arrays)
            value[index] = original - step
            minus = _evaluate(fn, arrays)
            value[index] = original
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(grads[name][index])
            err = relative_error(analytic, numeric)
            report.coords_checked += 1
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_param = name
                report.worst_index = tuple(int(i) for i in index)
                report.analytic = analytic
                report.numeric = numeric
        report.per_param[name] = worst_here

    logger.info(
        f"gradcheck: {report.coords_checked} coords, max rel err {report.max_rel_error:.3e} "
        f"(worst {report.worst_param}{list(report.worst_index)})"
    )
    return report
