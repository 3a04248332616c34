"""
Hyperedge prediction: per-node log-alpha from node + context embeddings, hard-concrete gates
(stochastic while training, z=0.5 plug-in at evaluation) and the closed-form L0 penalty.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import expit

from src.common import numerics as nx
from src.common.errors import ShapeError
from src.common.numerics import DiffNode, Tensor
from src.services.data import DataSample, NodeSet, collate

logger = logging.getLogger(__name__)

Z_EPS = 1e-6


class HardConcreteConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = -0.1
    delta: float = 1.1
    tau: float = 0.66

    @model_validator(mode="after")
    def check_stretch(self):
        if not self.gamma < 0 < self.delta:
            raise ValueError(f"need gamma < 0 < delta, got gamma={self.gamma}, delta={self.delta}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        return self

    @property
    def l0_shift(self) -> float:
        """tau * log(-gamma / delta), subtracted from log-alpha in the L0 closed form."""
        return self.tau * float(np.log(-self.gamma / self.delta))


@dataclass
class GateMatrix:
    values: Tensor
    mode: Literal["train", "eval"]

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]


EDGEGEN_PARAMS = ("emb_e", "gen.w1", "gen.b1", "gen.w2", "gen.b2")


def init_edgegen_params(
    num_features: int, d: int, k: int, hidden: int, rng: np.random.Generator
) -> Dict[str, Tensor]:
    return {
        "emb_e": nx.embedding_table(rng, num_features, d),
        "gen.w1": nx.glorot(rng, 2 * d, hidden),
        "gen.b1": np.zeros(hidden),
        "gen.w2": nx.glorot(rng, hidden, k),
        "gen.b2": np.zeros(k),
    }


def node_context_logalpha(nodes: NodeSet, params: Mapping[str, DiffNode]) -> DiffNode:
    """
    Log-alpha rows for every node of every sample in the batch.

    Row i of a sample is MLP([V_i, sum_{j != i} V_j]) with V_i = emb_e(o_i) * w_i.

    Returns:
        (total nodes) x k matrix, rows in NodeSet order.
    """
    embedded = nx.mul(nx.gather_rows(params["emb_e"], nodes.feature_ids), nodes.values[:, None])
    totals = nx.segment_sum(embedded, nodes.offsets)
    context = nx.sub(nx.gather_rows(totals, nodes.segment_index()), embedded)
    x = nx.concat([embedded, context], axis=1)
    hidden = nx.relu(nx.add(nx.matmul(x, params["gen.w1"]), params["gen.b1"]))
    return nx.add(nx.matmul(hidden, params["gen.w2"]), params["gen.b2"])


def logalpha_for_sample(sample: DataSample, params: Mapping[str, DiffNode]) -> DiffNode:
    return node_context_logalpha(collate([sample]), params)


def _stretch(s: DiffNode, cfg: HardConcreteConfig) -> DiffNode:
    stretched = nx.add(nx.scale(s, cfg.delta - cfg.gamma), cfg.gamma)
    return nx.clamp(stretched, 0.0, 1.0)


def sample_gates(
    logalpha: DiffNode,
    cfg: HardConcreteConfig,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[Tensor] = None,
) -> DiffNode:
    """
    Train-mode hard-concrete gates. Pass `noise` to freeze the uniform draw z.
    """
    if noise is None:
        if rng is None:
            raise ValueError("sample_gates needs an rng or a fixed noise draw")
        noise = rng.random(logalpha.shape)
    z = np.clip(np.asarray(noise, dtype=np.float64), Z_EPS, 1.0 - Z_EPS)
    if z.shape != logalpha.shape:
        raise ShapeError("sample_gates", logalpha.shape, z.shape)
    logistic_noise = np.log(z) - np.log1p(-z)
    s = nx.sigmoid(nx.scale(nx.add(logalpha, logistic_noise), 1.0 / cfg.tau))
    return _stretch(s, cfg)


def eval_gates(logalpha: DiffNode, cfg: HardConcreteConfig) -> DiffNode:
    return _stretch(nx.sigmoid(logalpha), cfg)


def l0_penalty(logalpha: DiffNode, cfg: HardConcreteConfig) -> DiffNode:
    """Expected number of nonzero gates, summed over every entry."""
    return nx.sum(nx.sigmoid(nx.sub(logalpha, cfg.l0_shift)))


def expected_nonzero(logalpha: float | Tensor, cfg: HardConcreteConfig) -> Tensor:
    return expit(np.asarray(logalpha, dtype=np.float64) - cfg.l0_shift)


def split_gate_matrices(
    gates: DiffNode | Tensor, nodes: NodeSet, mode: Literal["train", "eval"]
) -> List[GateMatrix]:
    values = gates.value if isinstance(gates, DiffNode) else np.asarray(gates)
    return [
        GateMatrix(values=values[start:end].copy(), mode=mode)
        for start, end in zip(nodes.offsets[:-1], nodes.offsets[1:])
    ]


def format_gate_matrix(values: Tensor, row_labels: Optional[Sequence[str]] = None) -> str:
    """One row per feature, one column per hyperedge, entries to 3 decimals."""
    values = np.asarray(values)
    lines = []
    for i, row in enumerate(values):
        cells = " ".join(f"{v:.3f}" for v in row)
        lines.append(f"{row_labels[i]}\t{cells}" if row_labels is not None else cells)
    return "\n".join(lines) + "\n"
