"""
Pair construction and bilinear discriminators for the two mutual-information terms.

s-Infomax pairs each hyperedge with the graph representation of a same-label sample (target 1)
and of an opposite-label sample (target 0). Infomin pairs each hyperedge with a second dropout
view of itself (target 1) and with another hyperedge of the same sample (target 0).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from src.common import numerics as nx
from src.common.numerics import DiffNode, Tensor

logger = logging.getLogger(__name__)

DISCRIMINATOR_PARAMS = ("disc.w_theta", "disc.w_omega")

SINGLE_LABEL = "single_label"
SINGLE_EDGE = "single_edge"


def init_discriminator_params(d: int, rng: np.random.Generator) -> Dict[str, Tensor]:
    return {
        "disc.w_theta": nx.glorot(rng, d, d),
        "disc.w_omega": nx.glorot(rng, d, d),
    }


@dataclass
class PairBatch:
    left: Optional[DiffNode]
    right: Optional[DiffNode]
    targets: Tensor
    flag: Optional[str] = None
    fallbacks: int = 0

    @classmethod
    def empty(cls, flag: str) -> "PairBatch":
        return cls(left=None, right=None, targets=np.zeros(0), flag=flag)

    @property
    def is_empty(self) -> bool:
        return self.left is None or len(self.targets) == 0

    def __len__(self) -> int:
        return len(self.targets)


def s_infomax_pairs(
    h: DiffNode,
    c: DiffNode,
    labels: np.ndarray,
    k: int,
    rng: np.random.Generator,
    detach_graph: bool = False,
) -> PairBatch:
    """
    Args:
        h: (samples * k) x d hyperedge representations, k rows per sample.
        c: samples x d graph representations.
        labels: 0/1 label per sample.

    Returns:
        2 * k * samples pairs, joint pairs first. A sample with no other same-label sample in
        the batch is paired with its own graph representation and counted in `fallbacks`.
    """
    labels = np.asarray(labels).astype(int)
    positives = np.flatnonzero(labels == 1)
    negatives = np.flatnonzero(labels == 0)
    if len(positives) == 0 or len(negatives) == 0:
        return PairBatch.empty(SINGLE_LABEL)

    joint_idx = np.empty(len(labels) * k, dtype=np.int64)
    marginal_idx = np.empty(len(labels) * k, dtype=np.int64)
    fallbacks = 0
    for s, y in enumerate(labels):
        same = positives if y == 1 else negatives
        same = same[same != s]
        if len(same) == 0:
            same = np.array([s])
            fallbacks += 1
        other = negatives if y == 1 else positives
        joint_idx[s * k : (s + 1) * k] = rng.choice(same, size=k)
        marginal_idx[s * k : (s + 1) * k] = rng.choice(other, size=k)

    graph = nx.detach(c) if detach_graph else c
    right = nx.concat([nx.gather_rows(graph, joint_idx), nx.gather_rows(graph, marginal_idx)])
    targets = np.concatenate([np.ones(len(joint_idx)), np.zeros(len(marginal_idx))])
    return PairBatch(nx.concat([h, h]), right, targets, fallbacks=fallbacks)


def infomin_pairs(
    h: DiffNode,
    k: int,
    p: float,
    rng: np.random.Generator,
    train: bool = True,
) -> PairBatch:
    """Same-edge pairs (two dropout views, target 1) then cross-edge pairs (target 0)."""
    if k < 2:
        return PairBatch.empty(SINGLE_EDGE)
    rows = h.shape[0]
    first = nx.dropout(h, p, rng, train)
    second = nx.dropout(h, p, rng, train)
    edge = np.arange(rows) % k
    base = np.arange(rows) - edge
    cross_idx = base + (edge + rng.integers(1, k, size=rows)) % k
    right = nx.concat([second, nx.gather_rows(second, cross_idx)])
    targets = np.concatenate([np.ones(rows), np.zeros(rows)])
    return PairBatch(nx.concat([first, first]), right, targets)


def discriminator_loss(pairs: PairBatch, w: DiffNode) -> DiffNode:
    """Mean BCE of sigmoid(left^T W right); an empty batch gives a constant zero."""
    if pairs.is_empty:
        return nx.constant(0.0)
    return nx.bce_with_logits(nx.bilinear(pairs.left, w, pairs.right), pairs.targets)


def pair_scores(pairs: PairBatch, w: Tensor) -> Tensor:
    if pairs.is_empty:
        return np.zeros(0)
    left, right = pairs.left.value, pairs.right.value
    return expit(((left @ w) * right).sum(axis=1))


def discriminator_accuracy(pairs: PairBatch, w: Tensor) -> float:
    if pairs.is_empty:
        return float("nan")
    return float(np.mean((pair_scores(pairs, w) > 0.5) == (pairs.targets == 1)))
