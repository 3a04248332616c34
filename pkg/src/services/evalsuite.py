"""
Ranking metrics, gate-order histograms, incidence dumps and the runtime scaling bench.
"""

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.common.numerics import Tensor
from src.services.data import DataSample

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 20)


@dataclass
class RankingResult:
    per_user: Dict[int, List[Tuple[int, float, int]]]
    metrics: Dict[str, float]
    excluded_users: int = 0

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "users": len(self.per_user) - self.excluded_users,
            "excluded_users": self.excluded_users,
        }


def _dcg(relevances: Sequence[int]) -> float:
    ranks = np.arange(1, len(relevances) + 1)
    return float(np.sum(np.asarray(relevances, dtype=np.float64) / np.log2(ranks + 1)))


def rank_metrics(
    users: Sequence[int],
    items: Sequence[int],
    scores: Sequence[float],
    labels: Sequence[int],
    ks: Sequence[int] = DEFAULT_KS,
) -> RankingResult:
    """
    Recall@K and NDCG@K with each user's own candidates ranked by score.

    Ties are broken by ascending item id. Users without a relevant candidate are excluded from
    the averages and counted.
    """
    grouped: Dict[int, List[Tuple[int, float, int]]] = {}
    for user, item, score, label in zip(users, items, scores, labels):
        grouped.setdefault(int(user), []).append((int(item), float(score), int(label)))
    for user in grouped:
        grouped[user].sort(key=lambda row: (-row[1], row[0]))

    totals = {f"{name}@{k}": 0.0 for k in ks for name in ("recall", "ndcg")}
    counted = 0
    excluded = 0
    for user, ranked in grouped.items():
        relevance = [rel for _, _, rel in ranked]
        n_relevant = sum(relevance)
        if n_relevant == 0:
            excluded += 1
            continue
        counted += 1
        for k in ks:
            top = relevance[:k]
            totals[f"recall@{k}"] += sum(top) / n_relevant
            totals[f"ndcg@{k}"] += _dcg(top) / _dcg([1] * min(k, n_relevant))

    if excluded:
        logger.warning(f"{excluded} users have no relevant candidate and are excluded")
    metrics = {name: (value / counted if counted else 0.0) for name, value in totals.items()}
    return RankingResult(per_user=grouped, metrics=metrics, excluded_users=excluded)


def rank_samples(
    samples: Sequence[DataSample], scores: Sequence[float], ks: Sequence[int] = DEFAULT_KS
) -> RankingResult:
    return rank_metrics(
        [s.user for s in samples],
        [s.item for s in samples],
        scores,
        [s.label for s in samples],
        ks,
    )


# --- Interaction orders ---


@dataclass
class OrderHistogram:
    counts: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / self.total

    @property
    def mean_order(self) -> float:
        if self.total == 0:
            return 0.0
        return float(np.arange(len(self.counts)) @ self.fractions)

    @property
    def empty_fraction(self) -> float:
        return float(self.fractions[0]) if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.tolist(),
            "fractions": [round(float(f), 6) for f in self.fractions],
            "mean_order": self.mean_order,
        }


def edge_orders(gates: Tensor, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(gates) > threshold).sum(axis=0)


def order_histogram(gate_matrices: Sequence[Tensor], threshold: float = 0.5) -> OrderHistogram:
    """Orders of every edge of every sample, where an edge's order is its count above threshold."""
    m_max = max((np.shape(g)[0] for g in gate_matrices), default=0)
    counts = np.zeros(m_max + 1, dtype=np.int64)
    for gates in gate_matrices:
        counts += np.bincount(edge_orders(gates, threshold), minlength=m_max + 1)
    return OrderHistogram(counts=counts)


def dump_incidence(
    gates: Tensor,
    feature_names: Sequence[str],
    threshold: float = 0.5,
    header: str = "",
) -> str:
    """
    Thresholded incidence as a text grid: one labeled row per feature, nonempty columns only,
    sorted by order ascending (stable, so duplicates keep their relative position).
    """
    binary = (np.asarray(gates) > threshold).astype(int)
    orders = binary.sum(axis=0)
    keep = [j for j in np.argsort(orders, kind="stable") if orders[j] > 0]
    lines = [header] if header else []
    lines.append("\t".join(["feature"] + [f"e{j}" for j in keep]))
    for i, name in enumerate(feature_names):
        lines.append("\t".join([name] + [str(binary[i, j]) for j in keep]))
    return "\n".join(lines) + "\n"


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# --- Runtime scaling ---


@dataclass
class ScalingTable:
    rows: List[Tuple[int, int, float]]
    slope_k: Optional[float] = None
    slope_m: Optional[float] = None

    def seconds(self, k: int, m: int) -> float:
        for rk, rm, sec in self.rows:
            if rk == k and rm == m:
                return sec
        raise KeyError((k, m))

    def to_csv(self, header: str = "") -> str:
        buffer = io.StringIO()
        if header:
            buffer.write(header + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["k", "m", "seconds"])
        for k, m, sec in self.rows:
            writer.writerow([k, m, f"{sec:.6f}"])
        return buffer.getvalue()


def truncate_features(samples: Sequence[DataSample], m: int) -> List[DataSample]:
    return [
        DataSample(s.features[:m], s.label, s.user, s.item) for s in samples if s.m >= m
    ]


def _slope(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    if len(set(xs)) < 2:
        return None
    return float(np.polyfit(np.asarray(xs, dtype=np.float64), np.asarray(ys), 1)[0])


def scaling_bench(
    samples: Sequence[DataSample],
    num_features: int,
    cfg,
    ks: Sequence[int],
    ms: Sequence[int],
    repeats: int = 1,
) -> ScalingTable:
    """
    Wall time of one training epoch over `samples` for each (k, m). The fastest of `repeats`
    runs is kept.
    """
    from src.services.trainer import init_model_state, train_epoch

    rows = []
    for m in ms:
        sliced = truncate_features(samples, m)
        if not sliced:
            raise ValueError(f"no sample has at least {m} features")
        for k in ks:
            run_cfg = cfg.model_copy(update={"k": k})
            best = float("inf")
            for _ in range(repeats):
                state = init_model_state(num_features, run_cfg)
                start = time.perf_counter()
                train_epoch(state, sliced, run_cfg, epoch=1)
                best = min(best, time.perf_counter() - start)
            logger.info(f"scaling: k={k} m={m} epoch {best:.3f}s")
            rows.append((k, m, best))

    table = ScalingTable(rows=rows)
    if len(ks) > 1:
        table.slope_k = _slope(
            [k for k, m, _ in rows if m == ms[0]], [s for k, m, s in rows if m == ms[0]]
        )
    if len(ms) > 1:
        table.slope_m = _slope(
            [m for k, m, _ in rows if k == ks[0]], [s for k, m, s in rows if k == ks[0]]
        )
    return table
