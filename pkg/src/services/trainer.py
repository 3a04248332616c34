"""
Training: prediction BCE plus weighted L0, s-Infomax and Infomin terms, optimized jointly with
Adam over stratified batches, with validation ranking, checkpoints, ablations and sweeps.
"""

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.common import numerics as nx
from src.common.artifacts import JsonlWriter, load_arrays, save_arrays
from src.common.errors import ArtifactError, ConfigError, NonFiniteError, TrainingDivergedError
from src.common.gradcheck import GradcheckReport, gradcheck
from src.common.numerics import DiffNode, Tensor
from src.common.optim import Adam, AdamState
from src.services.data import (
    DataSample,
    Dataset,
    NodeSet,
    check_feature_ids,
    collate,
    make_batches,
)
from src.services.edgegen import (
    GateMatrix,
    HardConcreteConfig,
    eval_gates,
    init_edgegen_params,
    l0_penalty,
    node_context_logalpha,
    sample_gates,
    split_gate_matrices,
)
from src.services.evalsuite import OrderHistogram, RankingResult, order_histogram, rank_samples
from src.services.ihgnn import EdgeReprSet, ihgnn_forward, init_ihgnn_params
from src.services.infomax import (
    discriminator_loss,
    infomin_pairs,
    init_discriminator_params,
    s_infomax_pairs,
)

logger = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_mi", "no_l0", "no_hp", "no_nm")
ABLATION_VARIANTS = ("full", "no_mi", "no_l0", "no_hp", "no_nm", "no_hp+no_nm")
LOSS_KEYS = ("loss_total", "loss_bce", "loss_l0", "loss_smax", "loss_min")

SWEEP_GRIDS: Dict[str, List[float]] = {
    "k": [5, 10, 20, 40, 60],
    "lambda1": [2e-4, 2e-3, 2e-2, 0.2, 0.4],
    "lambda2": [1e-3, 1e-2, 0.1, 1.0, 10.0],
    "lambda3": [1e-3, 1e-2, 0.1, 1.0, 10.0],
}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(64, ge=1)
    k: int = Field(40, ge=1)
    hidden: int = Field(64, ge=1)
    lambda1: float = Field(0.02, ge=0)
    lambda2: float = Field(1.0, ge=0)
    lambda3: float = Field(0.1, ge=0)
    dropout: float = Field(0.1, ge=0, lt=1)
    lr: float = Field(1e-3, ge=0)
    batch_size: int = Field(256, ge=2)
    epochs: int = Field(10, ge=0)
    seed: int = 0
    eval_every: int = Field(1, ge=1)
    no_mi: bool = False
    no_l0: bool = False
    no_hp: bool = False
    no_nm: bool = False
    detach_graph_repr: bool = False
    gate_threshold: float = Field(0.5, ge=0, le=1)
    gamma: float = -0.1
    delta: float = 1.1
    tau: float = 0.66
    record_wall_time: bool = False

    @property
    def hard_concrete(self) -> HardConcreteConfig:
        return HardConcreteConfig(gamma=self.gamma, delta=self.delta, tau=self.tau)

    @property
    def weights(self) -> Dict[str, float]:
        """Effective loss weights after the ablation switches."""
        return {
            "loss_l0": 0.0 if (self.no_l0 or self.no_hp) else self.lambda1,
            "loss_smax": 0.0 if self.no_mi else self.lambda2,
            "loss_min": 0.0 if self.no_mi else self.lambda3,
        }

    def variant(self, name: str) -> "TrainConfig":
        if name == "full":
            return self.model_copy()
        flags = name.split("+")
        unknown = [f for f in flags if f not in ABLATION_FLAGS]
        if unknown:
            raise ValueError(f"unknown ablation flag(s): {unknown}, expected {ABLATION_FLAGS}")
        return self.model_copy(update={f: True for f in flags})


@dataclass
class ModelState:
    params: Dict[str, Tensor]
    optimizer: Adam
    epoch: int = 0
    best_score: Optional[float] = None
    best_epoch: Optional[int] = None

    def nodes(self, trainable: bool = True) -> Dict[str, DiffNode]:
        if trainable:
            return {name: nx.parameter(value, name) for name, value in self.params.items()}
        return {name: nx.constant(value) for name, value in self.params.items()}

    def snapshot(self) -> "ModelState":
        return copy.deepcopy(self)


def init_model_state(num_features: int, cfg: TrainConfig) -> ModelState:
    rng = np.random.default_rng([cfg.seed, 0])
    params: Dict[str, Tensor] = {}
    params.update(init_edgegen_params(num_features, cfg.d, cfg.k, cfg.hidden, rng))
    params.update(init_ihgnn_params(num_features, cfg.d, cfg.hidden, rng))
    params.update(init_discriminator_params(cfg.d, rng))
    return ModelState(params=params, optimizer=Adam(lr=cfg.lr))


@dataclass
class ForwardResult:
    nodes: NodeSet
    logalpha: Optional[DiffNode]
    gates: DiffNode
    outputs: EdgeReprSet


def forward(
    nodes: NodeSet,
    params: Mapping[str, DiffNode],
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    train: bool = True,
    noise: Optional[Tensor] = None,
) -> ForwardResult:
    if cfg.no_hp:
        logalpha = None
        gates = nx.constant(np.ones((nodes.num_nodes, cfg.k)))
    else:
        logalpha = node_context_logalpha(nodes, params)
        if train:
            gates = sample_gates(logalpha, cfg.hard_concrete, rng=rng, noise=noise)
        else:
            gates = eval_gates(logalpha, cfg.hard_concrete)
    outputs = ihgnn_forward(nodes, gates, params, nonlinear=not cfg.no_nm)
    return ForwardResult(nodes, logalpha, gates, outputs)


@dataclass
class LossBreakdown:
    total: DiffNode
    components: Dict[str, float]
    single_label: bool = False
    fallbacks: int = 0


@contextmanager
def _component(name: str, epoch: int, batch: int) -> Iterator[None]:
    try:
        yield
    except NonFiniteError:
        raise TrainingDivergedError(name, epoch, batch) from None


def total_loss(
    samples: Sequence[DataSample],
    params: Mapping[str, DiffNode],
    cfg: TrainConfig,
    rng: np.random.Generator,
    noise: Optional[Tensor] = None,
    epoch: int = 0,
    batch: int = 0,
    frozen_graph: Optional[Tensor] = None,
) -> LossBreakdown:
    """
    BCE + lambda1 * (L0 per sample, batch mean) + lambda2 * s-Infomax + lambda3 * Infomin.

    Components are reported already weighted, so they sum to the total. Terms with weight 0
    are not built at all. `frozen_graph` replaces the graph representations paired by
    s-Infomax with fixed values.
    """
    if not samples:
        raise ValueError("total_loss needs a nonempty batch")
    nodes = collate(samples)
    weights = cfg.weights

    with _component("loss_bce", epoch, batch):
        fwd = forward(nodes, params, cfg, rng=rng, train=True, noise=noise)
        bce = nx.bce_with_logits(fwd.outputs.logits, nodes.labels)
    terms: List[DiffNode] = [bce]
    components = {"loss_bce": bce.item(), "loss_l0": 0.0, "loss_smax": 0.0, "loss_min": 0.0}
    single_label = False
    fallbacks = 0

    if weights["loss_l0"] > 0 and fwd.logalpha is not None:
        with _component("loss_l0", epoch, batch):
            l0 = nx.scale(
                l0_penalty(fwd.logalpha, cfg.hard_concrete),
                weights["loss_l0"] / nodes.num_samples,
            )
        terms.append(l0)
        components["loss_l0"] = l0.item()

    if weights["loss_smax"] > 0:
        with _component("loss_smax", epoch, batch):
            graph = fwd.outputs.c if frozen_graph is None else nx.constant(frozen_graph)
            pairs = s_infomax_pairs(
                fwd.outputs.h, graph, nodes.labels, cfg.k, rng, cfg.detach_graph_repr
            )
            smax = nx.scale(discriminator_loss(pairs, params["disc.w_theta"]), weights["loss_smax"])
        single_label = pairs.is_empty
        fallbacks = pairs.fallbacks
        if not pairs.is_empty:
            terms.append(smax)
            components["loss_smax"] = smax.item()

    if weights["loss_min"] > 0:
        with _component("loss_min", epoch, batch):
            pairs = infomin_pairs(fwd.outputs.h, cfg.k, cfg.dropout, rng, train=True)
            info_min = nx.scale(
                discriminator_loss(pairs, params["disc.w_omega"]), weights["loss_min"]
            )
        if not pairs.is_empty:
            terms.append(info_min)
            components["loss_min"] = info_min.item()

    with _component("loss_total", epoch, batch):
        total = terms[0]
        for term in terms[1:]:
            total = nx.add(total, term)
    components["loss_total"] = total.item()
    return LossBreakdown(total, components, single_label, fallbacks)


def batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch])


@dataclass
class EpochStats:
    epoch: int
    losses: Dict[str, float]
    batches: int
    single_label_batches: int
    seconds: float


def train_epoch(
    state: ModelState, samples: Sequence[DataSample], cfg: TrainConfig, epoch: int
) -> EpochStats:
    start = time.perf_counter()
    sums = {key: 0.0 for key in LOSS_KEYS}
    batches = 0
    single_label = 0
    order_rng = np.random.default_rng([cfg.seed, epoch])
    stream = make_batches(samples, cfg.batch_size, stratify=True, rng=order_rng)
    for b, batch in enumerate(stream):
        nodes = state.nodes(trainable=True)
        breakdown = total_loss(
            batch.samples, nodes, cfg, batch_rng(cfg.seed, epoch, b), epoch=epoch, batch=b
        )
        grads = nx.backward(breakdown.total, nodes)
        state.optimizer.step(state.params, grads)
        for key in LOSS_KEYS:
            sums[key] += breakdown.components[key]
        batches += 1
        single_label += int(breakdown.single_label)
    state.epoch = epoch
    means = {key: (value / batches if batches else 0.0) for key, value in sums.items()}
    return EpochStats(epoch, means, batches, single_label, time.perf_counter() - start)


def _check_scoring(state: ModelState, samples: Sequence[DataSample], cfg: TrainConfig) -> None:
    check_state_fits(state, cfg)
    check_feature_ids(samples, model_dims(state.params)["num_features"])


def predict(
    state: ModelState, samples: Sequence[DataSample], cfg: TrainConfig, batch_size: int = 1024
) -> Tensor:
    """Eval-mode probabilities: deterministic gates, no dropout, no tape for parameters."""
    if not samples:
        return np.zeros(0)
    _check_scoring(state, samples, cfg)
    params = state.nodes(trainable=False)
    out = []
    for start in range(0, len(samples), batch_size):
        nodes = collate(samples[start : start + batch_size])
        out.append(forward(nodes, params, cfg, train=False).outputs.probabilities.value)
    return np.concatenate(out)


def collect_eval_gates(
    state: ModelState, samples: Sequence[DataSample], cfg: TrainConfig, batch_size: int = 1024
) -> List[GateMatrix]:
    _check_scoring(state, samples, cfg)
    params = state.nodes(trainable=False)
    gates: List[GateMatrix] = []
    for start in range(0, len(samples), batch_size):
        nodes = collate(samples[start : start + batch_size])
        fwd = forward(nodes, params, cfg, train=False)
        gates += split_gate_matrices(fwd.gates, nodes, mode="eval")
    return gates


def evaluate(
    state: ModelState, samples: Sequence[DataSample], cfg: TrainConfig
) -> RankingResult:
    return rank_samples(samples, predict(state, samples, cfg))


def accuracy(state: ModelState, samples: Sequence[DataSample], cfg: TrainConfig) -> float:
    if not samples:
        return float("nan")
    probabilities = predict(state, samples, cfg)
    labels = np.array([s.label for s in samples])
    return float(np.mean((probabilities > 0.5) == (labels == 1)))


# --- Checkpoints ---


def model_dims(params: Mapping[str, Tensor]) -> Dict[str, int]:
    """Shape-bearing settings read off the parameter tables."""
    return {
        "num_features": int(params["emb_e"].shape[0]),
        "d": int(params["emb_e"].shape[1]),
        "k": int(params["gen.w2"].shape[1]),
        "hidden": int(params["fe.w1"].shape[1]),
    }


def check_state_fits(
    state: ModelState, cfg: TrainConfig, num_features: Optional[int] = None, source: str = "model"
) -> None:
    """Raises ConfigError when the parameters were built for other d, k, hidden or vocabulary."""
    found = model_dims(state.params)
    expected = {"d": cfg.d, "k": cfg.k, "hidden": cfg.hidden}
    if num_features is not None:
        expected["num_features"] = num_features
    mismatched = {key: (found[key], value) for key, value in expected.items() if found[key] != value}
    if mismatched:
        parts = ", ".join(f"{key}={have} (config {want})" for key, (have, want) in mismatched.items())
        raise ConfigError(f"{source} does not fit the run config: {parts}")


def save_checkpoint(
    path: str | Path, state: ModelState, cfg_hash: str, seed: int, subcommand: str = "train"
) -> Path:
    names = sorted(state.params)
    arrays: Dict[str, Tensor] = {f"param/{n}": state.params[n] for n in names}
    steps: Dict[str, int] = {}
    for n in sorted(state.optimizer.states):
        adam = state.optimizer.states[n]
        arrays[f"adam_m/{n}"] = adam.first_moment
        arrays[f"adam_v/{n}"] = adam.second_moment
        steps[n] = adam.step_count
    header = {
        "model": model_dims(state.params),
        "epoch": state.epoch,
        "best_score": state.best_score,
        "best_epoch": state.best_epoch,
        "rng": {"seed": seed, "next_epoch": state.epoch + 1},
        "adam": {
            "lr": state.optimizer.lr,
            "beta1": state.optimizer.beta1,
            "beta2": state.optimizer.beta2,
            "eps": state.optimizer.eps,
            "steps": steps,
        },
    }
    return save_arrays(path, arrays, subcommand, cfg_hash, header)


def load_checkpoint(
    path: str | Path,
    cfg: Optional[TrainConfig] = None,
    num_features: Optional[int] = None,
) -> ModelState:
    """
    Restores parameters and optimizer moments. With `cfg` (and `num_features`) the parameter
    shapes are checked against the run config before anything uses them.
    """
    arrays, meta = load_arrays(path)
    hyper = meta["adam"]
    optimizer = Adam(lr=hyper["lr"], beta1=hyper["beta1"], beta2=hyper["beta2"], eps=hyper["eps"])
    for name, steps in hyper["steps"].items():
        optimizer.states[name] = AdamState(
            first_moment=arrays[f"adam_m/{name}"].copy(),
            second_moment=arrays[f"adam_v/{name}"].copy(),
            step_count=steps,
            lr=optimizer.lr,
            beta1=optimizer.beta1,
            beta2=optimizer.beta2,
            eps=optimizer.eps,
        )
    params = {
        key.split("/", 1)[1]: value.copy() for key, value in arrays.items() if key.startswith("param/")
    }
    if not params:
        raise ArtifactError(f"{path} holds no parameters")
    state = ModelState(
        params=params,
        optimizer=optimizer,
        epoch=meta["epoch"],
        best_score=meta.get("best_score"),
        best_epoch=meta.get("best_epoch"),
    )
    if cfg is not None:
        check_state_fits(state, cfg, num_features, source=f"checkpoint {path}")
    return state


def checkpoint_config_hash(path: str | Path) -> str:
    return load_arrays(path)[1]["config_hash"]


# --- Training loop ---


@dataclass
class TrainResult:
    state: ModelState
    last_state: ModelState
    history: List[Dict[str, Any]]
    single_label_batches: int = 0

    @property
    def best_recall(self) -> Optional[float]:
        return self.state.best_score


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[str | Path] = None,
    cfg_hash: str = "",
    resume_from: Optional[str | Path] = None,
) -> TrainResult:
    """
    Runs cfg.epochs epochs and returns the state with the best validation Recall@10.

    With `out_dir`, writes metrics.jsonl, timings.jsonl, last.ckpt and best.ckpt there.
    """
    if not dataset.train or not dataset.val:
        raise ValueError("train and validation sets must be nonempty")

    if resume_from:
        state = load_checkpoint(resume_from, cfg, dataset.vocab.size)
        stored_hash = checkpoint_config_hash(resume_from)
        if cfg_hash and stored_hash != cfg_hash:
            logger.warning(f"Resuming a checkpoint written under config {stored_hash[:10]}")
        best_path = Path(resume_from).with_name("best.ckpt")
        if best_path.exists():
            best = load_checkpoint(best_path, cfg, dataset.vocab.size)
        else:
            best = state.snapshot()
        logger.info(f"Resuming from {resume_from} after epoch {state.epoch}")
    else:
        state = init_model_state(dataset.vocab.size, cfg)
        best = state.snapshot()

    out = Path(out_dir) if out_dir else None
    metrics_log = timings_log = None
    if out is not None:
        metrics_log = JsonlWriter(out / "metrics.jsonl", "train", cfg_hash, append=bool(resume_from))
        timings_log = JsonlWriter(out / "timings.jsonl", "train", cfg_hash, append=bool(resume_from))

    history: List[Dict[str, Any]] = []
    single_label_total = 0
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        stats = train_epoch(state, dataset.train, cfg, epoch)
        single_label_total += stats.single_label_batches

        recall10 = ndcg10 = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            ranking = evaluate(state, dataset.val, cfg)
            recall10 = ranking.metrics["recall@10"]
            ndcg10 = ranking.metrics["ndcg@10"]
            if state.best_score is None or recall10 > state.best_score:
                state.best_score = recall10
                state.best_epoch = epoch
                best = state.snapshot()
                if out is not None:
                    save_checkpoint(out / "best.ckpt", best, cfg_hash, cfg.seed)

        record = {
            "epoch": epoch,
            **stats.losses,
            "recall10": recall10,
            "ndcg10": ndcg10,
            "seconds": stats.seconds if cfg.record_wall_time else None,
        }
        history.append(record)
        if metrics_log is not None:
            metrics_log.write(record)
            timings_log.write({"epoch": epoch, "seconds": stats.seconds})
            save_checkpoint(out / "last.ckpt", state, cfg_hash, cfg.seed)

        recall_text = f"{recall10:.4f}" if recall10 is not None else "-"
        logger.info(
            f"epoch {epoch}: loss {stats.losses['loss_total']:.5f} "
            f"(bce {stats.losses['loss_bce']:.5f}) val recall@10 {recall_text} "
            f"in {stats.seconds:.2f}s"
        )
        if stats.single_label_batches:
            logger.warning(f"epoch {epoch}: {stats.single_label_batches} single-label batches")

    best.best_score, best.best_epoch = state.best_score, state.best_epoch
    return TrainResult(best, state, history, single_label_total)


# --- Ablations and sweeps ---


@dataclass
class VariantReport:
    name: str
    metrics: Dict[str, float]
    accuracy: float
    histogram: OrderHistogram
    deltas: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "accuracy": self.accuracy,
            "order_histogram": self.histogram.to_dict(),
            "deltas": self.deltas,
        }


def run_variant(dataset: Dataset, cfg: TrainConfig, name: str) -> VariantReport:
    variant_cfg = cfg.variant(name)
    result = train(dataset, variant_cfg)
    test = dataset.test or dataset.val
    ranking = evaluate(result.state, test, variant_cfg)
    gates = collect_eval_gates(result.state, test, variant_cfg)
    histogram = order_histogram([g.values for g in gates], variant_cfg.gate_threshold)
    report = VariantReport(
        name=name,
        metrics=ranking.metrics,
        accuracy=accuracy(result.state, test, variant_cfg),
        histogram=histogram,
    )
    logger.info(
        f"variant {name}: recall@10 {report.metrics['recall@10']:.4f} "
        f"acc {report.accuracy:.4f} empty-edge fraction {histogram.empty_fraction:.3f}"
    )
    return report


def run_parallel(jobs: List[Any], fn, workers: int) -> List[Any]:
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def ablate(
    dataset: Dataset, cfg: TrainConfig, flags: Sequence[str], workers: int = 1
) -> Dict[str, VariantReport]:
    """Trains `full` plus each requested variant with the same seed and budget."""
    names = ["full"] + [f for f in flags if f != "full"]
    for name in names:
        cfg.variant(name)
    reports = run_parallel(names, lambda name: run_variant(dataset, cfg, name), workers)
    by_name = {r.name: r for r in reports}
    full = by_name["full"]
    for report in reports:
        report.deltas = {key: report.metrics[key] - full.metrics[key] for key in full.metrics}
        report.deltas["accuracy"] = report.accuracy - full.accuracy
    return by_name


def sweep(
    dataset: Dataset,
    cfg: TrainConfig,
    param: str,
    values: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> List[Dict[str, Any]]:
    if param not in TrainConfig.model_fields:
        raise ValueError(f"cannot sweep unknown parameter '{param}'")
    values = list(values) if values is not None else SWEEP_GRIDS.get(param)
    if not values:
        raise ValueError(f"no grid defined for '{param}'; pass values explicitly")

    def run(value):
        field_type = TrainConfig.model_fields[param].annotation
        run_cfg = cfg.model_copy(update={param: field_type(value)})
        result = train(dataset, run_cfg)
        ranking = evaluate(result.state, dataset.test or dataset.val, run_cfg)
        logger.info(f"sweep {param}={value}: recall@10 {ranking.metrics['recall@10']:.4f}")
        return {"param": param, "value": value, "metrics": ranking.metrics}

    return run_parallel(values, run, workers)


# --- Gradient check of the full objective ---


def _random_samples(
    num_features: int, n_samples: int, rng: np.random.Generator, max_m: int = 5
) -> List[DataSample]:
    samples = []
    for n in range(n_samples):
        m = int(rng.integers(2, max_m + 1))
        ids = rng.choice(num_features, size=m, replace=False)
        values = rng.choice(np.array([-1.0, 1.0, 0.5]), size=m)
        samples.append(
            DataSample(tuple((int(i), float(v)) for i, v in zip(ids, values)), n % 2, user=n // 2, item=n)
        )
    return samples


def gradcheck_objective(
    cfg: TrainConfig,
    seed: int,
    tolerance: float = 1e-4,
    num_features: int = 10,
    n_samples: int = 6,
) -> GradcheckReport:
    """
    Finite-difference check of total_loss on a small random batch. Gate noise, dropout masks and
    pair draws are frozen by re-seeding the generator on every evaluation.

    With detach_graph_repr the paired graph representations are fixed at their values under the
    unperturbed parameters, which is the function whose gradient backward() reports.
    """
    small = cfg.model_copy(update={"d": 4, "k": 3, "hidden": 5, "seed": seed})
    data_rng = np.random.default_rng([seed, 100])
    samples = _random_samples(num_features, n_samples, data_rng)
    state = init_model_state(num_features, small)
    noise = data_rng.random((sum(s.m for s in samples), small.k))

    frozen_graph = None
    if small.detach_graph_repr:
        base = forward(collate(samples), state.nodes(trainable=False), small, noise=noise)
        frozen_graph = base.outputs.c.value.copy()

    def objective(params: Dict[str, DiffNode]) -> DiffNode:
        return total_loss(
            samples,
            params,
            small,
            np.random.default_rng([seed, 101]),
            noise=noise,
            frozen_graph=frozen_graph,
        ).total

    return gradcheck(objective, state.params, tolerance=tolerance)
