"""
Synthetic data with planted multiplicative interactions, scoring of learned gates against the
planted supports, and the desk-scale ablation and interaction-fit experiments.

The recovery metrics (membership AUC, co-activation, best-column Jaccard, order-distribution
distance) are this project's own construction; reports label them as such.
"""

import io
import logging
import re
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import expit
from scipy.stats import mannwhitneyu

from src.common import numerics as nx
from src.common.errors import AblationDirectionError, ConfigError
from src.common.numerics import Tensor
from src.common.optim import Adam
from src.common.settings import build_model
from src.services.data import DataSample, Dataset, FeatureVocab, collate, split
from src.services.evalsuite import OrderHistogram, order_histogram
from src.services.ihgnn import ihgnn_forward, init_ihgnn_params
from src.services.trainer import accuracy, collect_eval_gates, evaluate, run_parallel, train

logger = logging.getLogger(__name__)

RECOVERY_NOTE = "recovery metrics are a project-defined construction, not a published protocol"
USERS_PER_BLOCK = 20

_INTERACTION_LINE = re.compile(
    r"^\s*interaction\s*:\s*(?P<members>[\d\s,]+?)\s+coeff\s*:\s*(?P<coeff>[-+0-9.eE]+)\s*$"
)


class PlantedInteraction(BaseModel):
    model_config = ConfigDict(extra="forbid")

    members: Tuple[int, ...]
    coeff: float

    @field_validator("members")
    @classmethod
    def check_members(cls, members):
        if len(members) < 2:
            raise ValueError(f"planted interaction needs order >= 2, got {members}")
        if len(set(members)) != len(members):
            raise ValueError(f"planted interaction repeats a feature: {members}")
        return tuple(sorted(members))

    @property
    def order(self) -> int:
        return len(self.members)


class PlantedSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    m: int = Field(10, ge=2)
    noise: float = Field(0.0, ge=0)
    n_samples: int = Field(20000, ge=1)
    interactions: List[PlantedInteraction] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_interactions(self):
        supports = [q.members for q in self.interactions]
        if len(set(supports)) != len(supports):
            raise ValueError("planted interactions must be distinct")
        for q in self.interactions:
            if max(q.members) >= self.m:
                raise ValueError(f"interaction {q.members} refers past m={self.m}")
        return self

    @property
    def planted_features(self) -> np.ndarray:
        mask = np.zeros(self.m, dtype=bool)
        for q in self.interactions:
            mask[list(q.members)] = True
        return mask


def parse_planted_spec(text: str, source: str = "<spec>") -> PlantedSpec:
    """Key=value lines plus `interaction: 2,5,7 coeff: 3.0` lines."""
    interactions = []
    rest = []
    for line in text.splitlines():
        if line.strip().startswith("interaction"):
            match = _INTERACTION_LINE.match(line)
            if not match:
                raise ConfigError(f"{source}: cannot parse '{line.strip()}'")
            members = tuple(int(t) for t in match["members"].replace(" ", "").split(",") if t)
            interactions.append({"members": members, "coeff": float(match["coeff"])})
        else:
            rest.append(line)
    values = dict(dotenv_values(stream=io.StringIO("\n".join(rest))))
    return build_model(PlantedSpec, {**values, "interactions": interactions})


def load_planted_spec(path: str | Path) -> PlantedSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file not found: {path}")
    return parse_planted_spec(path.read_text(encoding="utf-8"), str(path))


# --- Generation ---


@dataclass
class SynthDataset:
    spec: PlantedSpec
    samples: List[DataSample]
    values: Tensor
    logits: Tensor
    vocab: FeatureVocab

    def split(self, rng: np.random.Generator, ratios=(0.7, 0.15, 0.15)) -> Dataset:
        parts = split(self.samples, ratios, rng)
        return Dataset(self.vocab, parts.train, parts.val, parts.test)

    def planted_incidence(self) -> Tensor:
        """m x (#planted) binary incidence of the planted supports."""
        inc = np.zeros((self.spec.m, len(self.spec.interactions)))
        for j, q in enumerate(self.spec.interactions):
            inc[list(q.members), j] = 1.0
        return inc


def planted_logits(spec: PlantedSpec, values: Tensor) -> Tensor:
    logits = np.zeros(values.shape[0])
    for q in spec.interactions:
        logits += q.coeff * np.prod(values[:, list(q.members)], axis=1)
    return logits


def generate(spec: PlantedSpec, n_samples: int, rng: np.random.Generator) -> SynthDataset:
    """Features 0..m-1 with values in {-1, +1}; label ~ Bernoulli(sigmoid(planted sum + noise))."""
    values = rng.choice(np.array([-1.0, 1.0]), size=(n_samples, spec.m))
    logits = planted_logits(spec, values)
    if spec.noise > 0:
        logits = logits + spec.noise * rng.standard_normal(n_samples)
    labels = (rng.random(n_samples) < expit(logits)).astype(int)
    vocab = FeatureVocab([f"f{i}" for i in range(spec.m)]).freeze()
    samples = [
        DataSample(
            features=tuple((i, float(values[n, i])) for i in range(spec.m)),
            label=int(labels[n]),
            user=n // USERS_PER_BLOCK,
            item=n,
        )
        for n in range(n_samples)
    ]
    return SynthDataset(spec, samples, values, logits, vocab)


def bayes_accuracy(
    spec: PlantedSpec, rng: Optional[np.random.Generator] = None, noise_draws: int = 20000
) -> float:
    """
    Accuracy of the Bayes classifier, by enumerating the planted features' value combinations.
    With noise, P(y=1|x) is estimated by Monte Carlo over the noise.
    """
    involved = np.flatnonzero(spec.planted_features)
    if len(involved) == 0:
        return 0.5
    combos = np.array(list(product([-1.0, 1.0], repeat=len(involved))))
    values = np.zeros((len(combos), spec.m))
    values[:, involved] = combos
    logits = planted_logits(spec, values)
    if spec.noise > 0:
        rng = rng or np.random.default_rng(0)
        eps = spec.noise * rng.standard_normal(noise_draws)
        p = expit(logits[:, None] + eps[None, :]).mean(axis=1)
    else:
        p = expit(logits)
    return float(np.mean(np.maximum(p, 1.0 - p)))


# --- Recovery scoring ---


@dataclass
class RecoveryReport:
    auc: float
    jaccard: List[float]
    coactivation: List[float]
    order_tv_distance: float
    samples: int
    note: str = RECOVERY_NOTE

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(self.jaccard)) if self.jaccard else 0.0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "jaccard": self.jaccard,
            "mean_jaccard": self.mean_jaccard,
            "coactivation": self.coactivation,
            "order_tv_distance": self.order_tv_distance,
            "samples": self.samples,
            "note": self.note,
        }


def membership_auc(scores: Tensor, members: np.ndarray) -> float:
    positive, negative = scores[members], scores[~members]
    if len(positive) == 0 or len(negative) == 0:
        return 0.5
    u = mannwhitneyu(positive, negative, alternative="two-sided").statistic
    return float(u / (len(positive) * len(negative)))


def _best_jaccard(support: set, binary: Tensor) -> float:
    best = 0.0
    for column in binary.T:
        active = set(np.flatnonzero(column).tolist())
        union = support | active
        if union:
            best = max(best, len(support & active) / len(union))
    return best


def recovery_score(
    gate_matrices: Sequence[Tensor], spec: PlantedSpec, threshold: float = 0.5
) -> RecoveryReport:
    """Scores eval gates (rows in feature-id order) against the planted supports."""
    if not gate_matrices:
        raise ValueError("recovery_score needs at least one gate matrix")
    stacked = np.stack([np.asarray(g) for g in gate_matrices])
    activation = stacked.mean(axis=(0, 2))
    auc = membership_auc(activation, spec.planted_features)

    jaccard, coactivation = [], []
    for q in spec.interactions:
        members = list(q.members)
        joint = np.prod(stacked[:, members, :], axis=1).max(axis=1)
        coactivation.append(float(joint.mean()))
        support = set(members)
        scores = [_best_jaccard(support, g > threshold) for g in stacked]
        jaccard.append(float(np.mean(scores)))

    learned = order_histogram(list(stacked), threshold)
    learned_orders = learned.counts[1:].astype(np.float64)
    planted = np.zeros(spec.m + 1)
    for q in spec.interactions:
        planted[q.order] += 1
    planted = planted[1:]
    tv = 0.0
    if learned_orders.sum() > 0 and planted.sum() > 0:
        tv = 0.5 * float(np.abs(learned_orders / learned_orders.sum() - planted / planted.sum()).sum())
    elif planted.sum() > 0:
        tv = 1.0
    return RecoveryReport(auc, jaccard, coactivation, tv, len(gate_matrices))


def gate_density(gate_matrices: Sequence[Tensor], threshold: float = 0.5) -> float:
    return float(np.mean([np.mean(np.asarray(g) > threshold) for g in gate_matrices]))


def random_gate_baseline(
    spec: PlantedSpec,
    density: float,
    k: int,
    n_samples: int,
    rng: np.random.Generator,
    trials: int = 20,
    threshold: float = 0.5,
) -> Dict[str, float]:
    """Mean recovery of random binary gates with a matched density, over `trials` draws."""
    aucs, jaccards = [], []
    for _ in range(trials):
        gates = (rng.random((n_samples, spec.m, k)) < density).astype(np.float64)
        report = recovery_score(list(gates), spec, threshold)
        aucs.append(report.auc)
        jaccards.append(report.mean_jaccard)
    return {"auc": float(np.mean(aucs)), "mean_jaccard": float(np.mean(jaccards))}


# --- Experiments ---


@dataclass
class VariantSummary:
    name: str
    accuracy: List[float] = field(default_factory=list)
    recall10: List[float] = field(default_factory=list)
    empty_fraction: List[float] = field(default_factory=list)
    mean_order: List[float] = field(default_factory=list)
    recovery: List[RecoveryReport] = field(default_factory=list)

    def median(self, metric: str) -> float:
        return float(np.median(getattr(self, metric)))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "recall10": self.recall10,
            "empty_fraction": self.empty_fraction,
            "mean_order": self.mean_order,
            "median": {
                key: self.median(key)
                for key in ("accuracy", "recall10", "empty_fraction", "mean_order")
            },
            "recovery": [r.to_dict() for r in self.recovery],
        }


@dataclass
class AblationSuiteReport:
    variants: Dict[str, VariantSummary]
    bayes_accuracy: float
    random_baseline: Dict[str, float]
    violations: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "variants": {name: v.to_dict() for name, v in self.variants.items()},
            "bayes_accuracy": self.bayes_accuracy,
            "random_gate_baseline": self.random_baseline,
            "violations": self.violations,
            "note": RECOVERY_NOTE,
        }


def direction_violations(
    variants: Dict[str, VariantSummary], margin: float = 0.005, metric: str = "accuracy"
) -> List[str]:
    """Checks the expected orderings between variants on seed medians."""
    violations = []
    full = variants.get("full")
    if full is None:
        return ["full variant missing"]
    full_score = full.median(metric)
    for name in ("no_mi", "no_l0", "no_hp", "no_nm"):
        if name in variants and variants[name].median(metric) > full_score + margin:
            violations.append(f"full < {name} on {metric}")
    both = variants.get("no_hp+no_nm")
    if both is not None:
        for name, other in variants.items():
            if name != "no_hp+no_nm" and both.median(metric) >= other.median(metric):
                violations.append(f"no_hp+no_nm not below {name} on {metric}")
    if "no_mi" in variants and not (
        variants["no_mi"].median("empty_fraction") > full.median("empty_fraction")
    ):
        violations.append("no_mi empty-edge fraction not above full")
    if "no_l0" in variants and not (variants["no_l0"].median("mean_order") > full.median("mean_order")):
        violations.append("no_l0 mean edge order not above full")
    return violations


def ablation_suite(
    spec: PlantedSpec,
    cfg,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = ("full", "no_mi", "no_l0", "no_hp", "no_nm", "no_hp+no_nm"),
    margin: float = 0.005,
    workers: int = 1,
    strict: bool = True,
) -> AblationSuiteReport:
    """
    Trains every variant on the same generated data per seed and compares seed medians.

    Raises:
        AblationDirectionError: with `strict`, when an expected ordering does not hold.
    """
    summaries = {name: VariantSummary(name) for name in variants}
    datasets = {
        seed: generate(spec, spec.n_samples, np.random.default_rng([seed, 10])).split(
            np.random.default_rng([seed, 11])
        )
        for seed in seeds
    }
    jobs = [(name, seed) for seed in seeds for name in variants]

    def run(job):
        name, seed = job
        run_cfg = cfg.variant(name).model_copy(update={"seed": seed})
        dataset = datasets[seed]
        state = train(dataset, run_cfg).state
        gates = [g.values for g in collect_eval_gates(state, dataset.test, run_cfg)]
        hist: OrderHistogram = order_histogram(gates, run_cfg.gate_threshold)
        return (
            name,
            accuracy(state, dataset.test, run_cfg),
            evaluate(state, dataset.test, run_cfg).metrics["recall@10"],
            hist,
            recovery_score(gates, spec, run_cfg.gate_threshold),
            gate_density(gates, run_cfg.gate_threshold),
        )

    densities = []
    for name, acc, recall, hist, recovery, density in run_parallel(jobs, run, workers):
        summary = summaries[name]
        summary.accuracy.append(acc)
        summary.recall10.append(recall)
        summary.empty_fraction.append(hist.empty_fraction)
        summary.mean_order.append(hist.mean_order)
        summary.recovery.append(recovery)
        if name == "full":
            densities.append(density)
        logger.info(f"{name}: acc {acc:.4f} recall@10 {recall:.4f} auc {recovery.auc:.3f}")

    baseline = random_gate_baseline(
        spec,
        float(np.median(densities)) if densities else 0.5,
        cfg.k,
        n_samples=200,
        rng=np.random.default_rng(12),
    )
    report = AblationSuiteReport(
        variants=summaries,
        bayes_accuracy=bayes_accuracy(spec),
        random_baseline=baseline,
        violations=direction_violations(summaries, margin),
    )
    for violation in report.violations:
        logger.warning(f"ablation direction violated: {violation}")
    if strict and report.violations:
        raise AblationDirectionError(
            f"ablation ordering violated: {report.violations[0]}", violations=report.violations
        )
    return report


@dataclass
class FitCheckReport:
    mse_nonlinear: float
    mse_linear: float
    steps: int

    def to_dict(self) -> dict:
        return {"mse_nonlinear": self.mse_nonlinear, "mse_linear": self.mse_linear, "steps": self.steps}


def _fit_product(
    samples: List[DataSample], targets: Tensor, nonlinear: bool, d: int, hidden: int,
    steps: int, lr: float, seed: int,
) -> float:
    nodes = collate(samples)
    gates = nx.constant(np.ones((nodes.num_nodes, 1)))
    params = init_ihgnn_params(2, d, hidden, np.random.default_rng(seed))
    optimizer = Adam(lr=lr)
    for _ in range(steps):
        pnodes = {name: nx.parameter(value, name) for name, value in params.items()}
        logits = ihgnn_forward(nodes, gates, pnodes, nonlinear).logits
        diff = nx.sub(logits, targets)
        loss = nx.mean(nx.mul(diff, diff))
        optimizer.step(params, nx.backward(loss, pnodes))
    fitted = {name: nx.constant(value) for name, value in params.items()}
    logits = ihgnn_forward(nodes, gates, fitted, nonlinear).logits.value
    return float(np.mean((logits - targets) ** 2))


def interaction_fit_check(
    n_samples: int = 256,
    steps: int = 1500,
    d: int = 16,
    hidden: int = 64,
    lr: float = 0.01,
    seed: int = 0,
) -> FitCheckReport:
    """
    Regresses y = x_a * x_b with one fixed hyperedge over {a, b}, once with the nonlinear edge
    model and once with the linear one, under the same budget.
    """
    rng = np.random.default_rng(seed)
    values = rng.choice(np.array([-1.0, 1.0]), size=(n_samples, 2))
    targets = values[:, 0] * values[:, 1]
    samples = [
        DataSample(((0, float(a)), (1, float(b))), label=0, user=0, item=n)
        for n, (a, b) in enumerate(values)
    ]
    nonlinear = _fit_product(samples, targets, True, d, hidden, steps, lr, seed)
    linear = _fit_product(samples, targets, False, d, hidden, steps, lr, seed)
    logger.info(f"interaction fit: nonlinear mse {nonlinear:.5f}, linear mse {linear:.5f}")
    return FitCheckReport(nonlinear, linear, steps)
