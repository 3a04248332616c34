"""
Interaction-based hypergraph network: edge modeling over gate-weighted node sums, gate-weighted
node patches, mean pooling and a linear readout. Also hosts the fixed-incidence forms of the
classic factorization models together with their direct-formula oracles.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.common import numerics as nx
from src.common.errors import OracleMismatchError
from src.common.numerics import DiffNode, Tensor
from src.services.data import DataSample, NodeSet, collate
from src.services.edgegen import format_gate_matrix

logger = logging.getLogger(__name__)

PATCH_EPS = 1e-8

IHGNN_PARAMS = ("emb_g", "fe.w1", "fe.b1", "fe.w2", "fe.b2", "readout.w", "readout.b")

EdgeKind = Literal["dot", "elementwise", "mlp"]
ReadoutKind = Literal["sum", "linear", "mlp"]
ClassicMode = Literal["fm", "nfm", "deepfm"]


def init_ihgnn_params(
    num_features: int, d: int, hidden: int, rng: np.random.Generator
) -> Dict[str, Tensor]:
    return {
        "emb_g": nx.embedding_table(rng, num_features, d),
        "fe.w1": nx.glorot(rng, d, hidden),
        "fe.b1": np.zeros(hidden),
        "fe.w2": nx.glorot(rng, hidden, d),
        "fe.b2": np.zeros(d),
        "readout.w": nx.glorot(rng, d, 1),
        "readout.b": np.zeros(1),
    }


@dataclass
class EdgeReprSet:
    """Batch forward outputs. h stacks k rows per sample, node_patch follows NodeSet rows."""

    h: DiffNode
    node_patch: DiffNode
    c: DiffNode
    logits: DiffNode
    probabilities: DiffNode

    def for_sample(self, s: int, nodes: NodeSet, k: int) -> Dict[str, Tensor]:
        start, end = nodes.offsets[s], nodes.offsets[s + 1]
        return {
            "h": self.h.value[s * k : (s + 1) * k],
            "node_patch": self.node_patch.value[start:end],
            "c": self.c.value[s],
            "logit": float(self.logits.value[s]),
            "probability": float(self.probabilities.value[s]),
        }


def embed_nodes(nodes: NodeSet, table: DiffNode) -> DiffNode:
    return nx.mul(nx.gather_rows(table, nodes.feature_ids), nodes.values[:, None])


def edge_model(x: DiffNode, params: Mapping[str, DiffNode], nonlinear: bool = True) -> DiffNode:
    """f_E: d -> hidden -> d. Without `nonlinear` the hidden ReLU is dropped."""
    hidden = nx.add(nx.matmul(x, params["fe.w1"]), params["fe.b1"])
    if nonlinear:
        hidden = nx.relu(hidden)
    return nx.add(nx.matmul(hidden, params["fe.w2"]), params["fe.b2"])


def aggregate_edges(nodes: NodeSet, gates: DiffNode, rows: DiffNode) -> DiffNode:
    """sum_i gates_ij * rows_i per sample, stacked into (samples * k) x width."""
    return nx.block_matmul(gates, rows, nodes.offsets, nodes.offsets, transpose_a=True)


def edge_representations(
    nodes: NodeSet,
    gates: DiffNode,
    params: Mapping[str, DiffNode],
    nonlinear: bool = True,
) -> DiffNode:
    """h_j = f_E(sum_i gates_ij * V_i) per sample, stacked into (samples * k) x d."""
    edge_sums = aggregate_edges(nodes, gates, embed_nodes(nodes, params["emb_g"]))
    return edge_model(edge_sums, params, nonlinear)


def graph_readout(
    nodes: NodeSet,
    gates: DiffNode,
    h: DiffNode,
    params: Mapping[str, DiffNode],
) -> EdgeReprSet:
    k = gates.shape[1]
    weighted = nx.block_matmul(gates, h, nodes.offsets, nodes.edge_offsets(k))
    weight_sums = nx.add(nx.sum(gates, axis=1, keepdims=True), PATCH_EPS)
    node_patch = nx.div(weighted, weight_sums)
    c = nx.segment_mean(node_patch, nodes.offsets)
    logits = nx.reshape(
        nx.add(nx.matmul(c, params["readout.w"]), params["readout.b"]), (nodes.num_samples,)
    )
    return EdgeReprSet(
        h=h, node_patch=node_patch, c=c, logits=logits, probabilities=nx.sigmoid(logits)
    )


def ihgnn_forward(
    nodes: NodeSet,
    gates: DiffNode,
    params: Mapping[str, DiffNode],
    nonlinear: bool = True,
) -> EdgeReprSet:
    h = edge_representations(nodes, gates, params, nonlinear)
    return graph_readout(nodes, gates, h, params)


# --- Fixed incidences (classic models) ---


@dataclass
class FixedIncidence:
    incidence: Tensor
    column_kinds: Tuple[EdgeKind, ...]
    readout_kind: ReadoutKind

    def __post_init__(self):
        self.incidence = np.asarray(self.incidence, dtype=np.float64)
        if self.incidence.ndim != 2 or self.incidence.shape[1] != len(self.column_kinds):
            raise ValueError(
                f"incidence of shape {self.incidence.shape} needs one kind per column"
            )
        degrees = self.degrees
        for j, kind in enumerate(self.column_kinds):
            if kind in ("dot", "elementwise") and degrees[j] not in (1, 2):
                raise ValueError(f"{kind} column {j} must link 1 or 2 nodes, links {degrees[j]}")

    @property
    def degrees(self) -> np.ndarray:
        return (self.incidence != 0).sum(axis=0)

    @property
    def m(self) -> int:
        return self.incidence.shape[0]

    @property
    def k(self) -> int:
        return self.incidence.shape[1]


def _pair_then_loop_columns(m: int, self_loops: bool = True) -> Tensor:
    columns = []
    for i, j in combinations(range(m), 2):
        col = np.zeros(m)
        col[[i, j]] = 1.0
        columns.append(col)
    if self_loops:
        columns += list(np.eye(m))
    if not columns:
        return np.zeros((m, 0))
    return np.stack(columns, axis=1)


def build_fm_incidence(m: int, kind: EdgeKind = "dot") -> FixedIncidence:
    """All unordered pairs in lexicographic order, then the m self-loops."""
    if m < 1:
        raise ValueError("build_fm_incidence needs m >= 1")
    incidence = _pair_then_loop_columns(m)
    readout: ReadoutKind = "sum" if kind == "dot" else "mlp"
    return FixedIncidence(incidence, (kind,) * incidence.shape[1], readout)


def build_nfm_incidence(m: int) -> FixedIncidence:
    return build_fm_incidence(m, kind="elementwise")


def build_deepfm_incidence(m: int) -> FixedIncidence:
    fm = build_fm_incidence(m)
    incidence = np.concatenate([fm.incidence, np.ones((m, 1))], axis=1)
    return FixedIncidence(incidence, fm.column_kinds + ("mlp",), "sum")


def build_l0sign_incidence(m: int) -> FixedIncidence:
    """All pairs, no self-loops; every edge goes through the IHGNN edge model."""
    if m < 2:
        raise ValueError("build_l0sign_incidence needs m >= 2")
    incidence = _pair_then_loop_columns(m, self_loops=False)
    return FixedIncidence(incidence, ("mlp",) * incidence.shape[1], "linear")


def format_incidence(inc: FixedIncidence, row_labels: Optional[Sequence[str]] = None) -> str:
    return format_gate_matrix(inc.incidence, row_labels)


CLASSIC_PARAMS = ("cm.emb", "cm.linear", "cm.bias", "cm.w1", "cm.b1", "cm.w2", "cm.b2")


def init_classic_params(
    num_features: int, d: int, hidden: int, rng: np.random.Generator
) -> Dict[str, Tensor]:
    """Shared embeddings, per-feature linear weights and a d -> hidden -> 1 MLP."""
    return {
        "cm.emb": nx.embedding_table(rng, num_features, d),
        "cm.linear": rng.normal(0.0, 0.1, size=num_features),
        "cm.bias": rng.normal(0.0, 0.1, size=1),
        "cm.w1": nx.glorot(rng, d, hidden),
        "cm.b1": rng.normal(0.0, 0.1, size=hidden),
        "cm.w2": nx.glorot(rng, hidden, 1),
        "cm.b2": np.zeros(1),
    }


def _mlp_scalar(x: Tensor, params: Mapping[str, Tensor]) -> float:
    hidden = np.maximum(x @ params["cm.w1"] + params["cm.b1"], 0.0)
    return float((hidden @ params["cm.w2"] + params["cm.b2"])[0])


def classic_mlp(x: DiffNode, params: Mapping[str, DiffNode]) -> DiffNode:
    """d -> hidden -> 1 per row."""
    hidden = nx.relu(nx.add(nx.matmul(x, params["cm.w1"]), params["cm.b1"]))
    return nx.add(nx.matmul(hidden, params["cm.w2"]), params["cm.b2"])


def _column_mask(inc: FixedIncidence, keep) -> Tensor:
    degrees = inc.degrees
    return np.array(
        [[1.0 if keep(kind, degrees[j]) else 0.0] for j, kind in enumerate(inc.column_kinds)]
    )


def fixed_incidence_logit(
    sample: DataSample, inc: FixedIncidence, params: Mapping[str, DiffNode]
) -> DiffNode:
    """
    The hypergraph forward with a fixed incidence in place of sampled gates.

    Column sums come from the same gate-weighted aggregation the network uses. Dot pair edges
    score 0.5 * (|s|^2 - sum |v|^2), elementwise pair edges pool that product per dimension for
    the MLP readout, self-loops contribute the feature's linear weight and mlp edges map s
    through the classic MLP. The sum readout adds every edge score to the bias.
    """
    if inc.m != sample.m:
        raise ValueError(f"incidence has {inc.m} rows, sample has {sample.m} features")
    if inc.readout_kind == "linear":
        raise ValueError("linear readout incidences run through ihgnn_forward")
    nodes = collate([sample])
    gates = nx.constant(inc.incidence)
    embedded = embed_nodes(nodes, params["cm.emb"])
    linear_table = nx.reshape(params["cm.linear"], (params["cm.linear"].shape[0], 1))
    linear = nx.mul(nx.gather_rows(linear_table, nodes.feature_ids), nodes.values[:, None])

    sums = aggregate_edges(nodes, gates, embedded)
    squares = aggregate_edges(nodes, gates, nx.mul(embedded, embedded))
    pair = nx.scale(nx.sub(nx.mul(sums, sums), squares), 0.5)
    loops = aggregate_edges(nodes, gates, linear)

    dot_pairs = _column_mask(inc, lambda kind, deg: kind == "dot" and deg == 2)
    self_loops = _column_mask(inc, lambda kind, deg: kind != "mlp" and deg == 1)
    mlp_edges = _column_mask(inc, lambda kind, deg: kind == "mlp")
    scores = nx.add(
        nx.add(
            nx.mul(nx.sum(pair, axis=1, keepdims=True), dot_pairs),
            nx.mul(loops, self_loops),
        ),
        nx.mul(classic_mlp(sums, params), mlp_edges),
    )
    logit = nx.add(nx.sum(scores), params["cm.bias"])
    if inc.readout_kind == "mlp":
        elementwise = _column_mask(inc, lambda kind, deg: kind == "elementwise" and deg == 2)
        pooled = nx.sum(nx.mul(pair, elementwise), axis=0, keepdims=True)
        logit = nx.add(logit, nx.reshape(classic_mlp(pooled, params), (1,)))
    return logit


def classic_incidence_score(
    sample: DataSample, inc: FixedIncidence, params: Mapping[str, Tensor]
) -> float:
    return fixed_incidence_logit(sample, inc, {n: nx.constant(v) for n, v in params.items()}).item()


def direct_fm_score(sample: DataSample, params: Mapping[str, Tensor]) -> float:
    ids = [fid for fid, _ in sample.features]
    w = [v for _, v in sample.features]
    v = [params["cm.emb"][fid] * wi for fid, wi in zip(ids, w)]
    score = float(params["cm.bias"][0])
    score += sum(float(params["cm.linear"][fid] * wi) for fid, wi in zip(ids, w))
    for i, j in combinations(range(len(ids)), 2):
        score += float(v[i] @ v[j])
    return score


def direct_nfm_score(sample: DataSample, params: Mapping[str, Tensor]) -> float:
    ids = [fid for fid, _ in sample.features]
    w = [v for _, v in sample.features]
    v = [params["cm.emb"][fid] * wi for fid, wi in zip(ids, w)]
    bi_interaction = np.zeros(params["cm.emb"].shape[1])
    for i, j in combinations(range(len(ids)), 2):
        bi_interaction += v[i] * v[j]
    score = float(params["cm.bias"][0])
    score += sum(float(params["cm.linear"][fid] * wi) for fid, wi in zip(ids, w))
    return score + _mlp_scalar(bi_interaction, params)


def direct_deepfm_score(sample: DataSample, params: Mapping[str, Tensor]) -> float:
    v = np.stack([params["cm.emb"][fid] * wi for fid, wi in sample.features])
    return direct_fm_score(sample, params) + _mlp_scalar(v.sum(axis=0), params)


_CLASSIC = {
    "fm": (build_fm_incidence, direct_fm_score),
    "nfm": (build_nfm_incidence, direct_nfm_score),
    "deepfm": (build_deepfm_incidence, direct_deepfm_score),
}


def fm_oracle_equivalence(
    sample: DataSample, params: Mapping[str, Tensor], mode: ClassicMode = "fm"
) -> Tuple[float, float]:
    """Returns (fixed-incidence forward score, direct formula score) from the same parameters."""
    build, direct = _CLASSIC[mode]
    return classic_incidence_score(sample, build(sample.m), params), direct(sample, params)


@dataclass
class OracleReport:
    mode: str
    samples: int
    max_abs_diff: float
    worst_sample: int


def check_oracle_batch(
    samples: Sequence[DataSample],
    params: Mapping[str, Tensor],
    mode: ClassicMode = "fm",
    tolerance: float = 1e-9,
) -> OracleReport:
    diffs = []
    for sample in samples:
        ours, oracle = fm_oracle_equivalence(sample, params, mode)
        diffs.append(abs(ours - oracle))
    worst = int(np.argmax(diffs)) if diffs else -1
    report = OracleReport(mode, len(samples), float(max(diffs, default=0.0)), worst)
    logger.info(f"{mode} oracle over {len(samples)} samples: max |diff| {report.max_abs_diff:.3e}")
    if report.max_abs_diff > tolerance:
        raise OracleMismatchError(
            f"{mode} incidence score differs from the direct formula by "
            f"{report.max_abs_diff:.3e} on sample {worst}",
            mode=mode,
            worst_sample=worst,
            max_abs_diff=report.max_abs_diff,
        )
    return report


def l0sign_forward(
    samples: Sequence[DataSample], params: Mapping[str, DiffNode], nonlinear: bool = True
) -> List[EdgeReprSet]:
    """The hypergraph network on a fixed all-pairs incidence, one sample at a time."""
    outputs = []
    for sample in samples:
        inc = build_l0sign_incidence(sample.m)
        outputs.append(ihgnn_forward(collate([sample]), nx.constant(inc.incidence), params, nonlinear))
    return outputs
