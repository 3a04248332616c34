"""
Feature vocabulary, rating-file ingestion, implicit-feedback conversion, negative sampling,
splits and batch assembly. A sample is the node set of one hypergraph: its features.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.common.artifacts import dumps
from src.common.errors import ArtifactError, ParseError, VocabularyError
from src.common.settings import config_hash, get_cache_dir

logger = logging.getLogger(__name__)

DATA_MAGIC = "HIRSDATA1"

Feature = Tuple[int, float]


class DataSchema(BaseModel):
    """Column layout and implicit-feedback rules of a ratings dataset."""

    model_config = ConfigDict(extra="forbid")

    ratings_path: Optional[str] = None
    user_features_path: Optional[str] = None
    item_features_path: Optional[str] = None
    separator: str = "::"
    feature_separator: str = "|"
    user_col: int = 0
    item_col: int = 1
    rating_col: int = 2
    rating_threshold: float = 3.0
    implicit_mode: Literal["threshold", "all_rated"] = "threshold"
    train_ratio: float = 0.7
    val_ratio: float = 0.15
    test_ratio: float = 0.15


class FeatureVocab:
    """Dense bijection between feature names and ids 0..size-1."""

    def __init__(self, names: Sequence[str] = ()):
        self._ids: Dict[str, int] = {}
        self._names: List[str] = []
        self.frozen = False
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        existing = self._ids.get(name)
        if existing is not None:
            return existing
        if self.frozen:
            raise VocabularyError(f"feature '{name}' is not in the frozen vocabulary")
        self._ids[name] = len(self._names)
        self._names.append(name)
        return self._ids[name]

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise VocabularyError(f"feature '{name}' is not in the vocabulary") from None

    def name_of(self, feature_id: int) -> str:
        return self._names[feature_id]

    def freeze(self) -> "FeatureVocab":
        self.frozen = True
        return self

    @property
    def names(self) -> List[str]:
        return list(self._names)

    @property
    def size(self) -> int:
        return len(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids


@dataclass(frozen=True)
class DataSample:
    features: Tuple[Feature, ...]
    label: int
    user: int
    item: int = -1

    def __post_init__(self):
        if not self.features:
            raise ValueError("a sample needs at least one feature")
        ids = [fid for fid, _ in self.features]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate feature ids in sample: {ids}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def m(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class RawRecord:
    user: str
    item: str
    rating: float
    features: Tuple[Feature, ...]
    line: int


@dataclass
class InteractionTable:
    """Loaded ratings joined with entity features, plus the lookups negative sampling needs."""

    records: List[RawRecord]
    vocab: FeatureVocab
    user_features: Dict[str, List[Feature]] = field(default_factory=dict)
    item_features: Dict[str, List[Feature]] = field(default_factory=dict)
    users: Dict[str, int] = field(default_factory=dict)
    items: Dict[str, int] = field(default_factory=dict)
    rated: Dict[int, Set[int]] = field(default_factory=dict)
    dropped: int = 0

    def item_name(self, index: int) -> str:
        return self._item_names[index]

    @property
    def _item_names(self) -> List[str]:
        names = [""] * len(self.items)
        for name, index in self.items.items():
            names[index] = name
        return names

    def features_for(self, user: str, item: str) -> Tuple[Feature, ...]:
        """User features followed by item features, first occurrence of an id wins."""
        merged: Dict[int, float] = {}
        merged.setdefault(self.vocab.add(f"user={user}"), 1.0)
        merged.setdefault(self.vocab.add(f"item={item}"), 1.0)
        for fid, value in self.user_features.get(user, []):
            merged.setdefault(fid, value)
        for fid, value in self.item_features.get(item, []):
            merged.setdefault(fid, value)
        return tuple(merged.items())


@dataclass
class Batch:
    samples: List[DataSample]
    positive_idx: List[int]
    negative_idx: List[int]

    @property
    def single_label(self) -> bool:
        return not (self.positive_idx and self.negative_idx)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class NodeSet:
    """Ragged node rows of a batch: sample s owns rows offsets[s]:offsets[s+1]."""

    feature_ids: np.ndarray
    values: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray
    users: np.ndarray

    @property
    def num_samples(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def segment_index(self) -> np.ndarray:
        """Sample index of every node row."""
        return np.repeat(np.arange(self.num_samples), self.lengths)

    def edge_offsets(self, k: int) -> np.ndarray:
        """Row offsets of per-sample k-edge blocks stacked in sample order."""
        return np.arange(self.num_samples + 1, dtype=np.int64) * k


@dataclass
class Dataset:
    vocab: FeatureVocab
    train: List[DataSample]
    val: List[DataSample]
    test: List[DataSample]
    meta: Dict[str, int] = field(default_factory=dict)

    def splits(self) -> Dict[str, List[DataSample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


# --- Ingestion ---


def _parse_feature_token(token: str) -> Tuple[str, float]:
    name, sep, raw = token.rpartition(":")
    if sep and name:
        try:
            return name, float(raw)
        except ValueError:
            pass
    return token, 1.0


def _load_feature_file(
    path: str, schema: DataSchema, vocab: FeatureVocab
) -> Dict[str, List[Feature]]:
    features: Dict[str, List[Feature]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(schema.separator, 1)
            if len(parts) != 2 or not parts[0]:
                raise ParseError(path, lineno, "expected '<entity-id><sep><feature list>'")
            entity, rest = parts[0].strip(), parts[1]
            entries: List[Feature] = []
            for token in rest.split(schema.feature_separator):
                token = token.strip()
                if not token:
                    continue
                name, value = _parse_feature_token(token)
                entries.append((vocab.add(name), value))
            features[entity] = entries
    logger.info(f"Loaded features for {len(features)} entities from {path}")
    return features


def load_interactions(
    schema: DataSchema,
    ratings_path: Optional[str] = None,
    user_features_path: Optional[str] = None,
    item_features_path: Optional[str] = None,
) -> InteractionTable:
    """
    Reads the ratings file and joins each row with user-side and item-side feature lists.

    Rows whose user or item is missing from a provided feature file are dropped and counted.
    """
    ratings_path = ratings_path or schema.ratings_path
    user_features_path = user_features_path or schema.user_features_path
    item_features_path = item_features_path or schema.item_features_path
    if ratings_path is None:
        raise ValueError("no ratings file configured")

    vocab = FeatureVocab()
    table = InteractionTable(records=[], vocab=vocab)
    if user_features_path:
        table.user_features = _load_feature_file(user_features_path, schema, vocab)
    if item_features_path:
        table.item_features = _load_feature_file(item_features_path, schema, vocab)
        for item in table.item_features:
            table.items.setdefault(item, len(table.items))

    needed = max(schema.user_col, schema.item_col, schema.rating_col) + 1
    with open(ratings_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split(schema.separator)
            if len(fields) < needed:
                raise ParseError(
                    ratings_path, lineno, f"expected at least {needed} columns, got {len(fields)}"
                )
            user = fields[schema.user_col].strip()
            item = fields[schema.item_col].strip()
            try:
                rating = float(fields[schema.rating_col])
            except ValueError:
                raise ParseError(
                    ratings_path, lineno, f"rating '{fields[schema.rating_col]}' is not a number"
                ) from None
            if (user_features_path and user not in table.user_features) or (
                item_features_path and item not in table.item_features
            ):
                table.dropped += 1
                continue
            u = table.users.setdefault(user, len(table.users))
            i = table.items.setdefault(item, len(table.items))
            table.rated.setdefault(u, set()).add(i)
            table.records.append(
                RawRecord(user, item, rating, table.features_for(user, item), lineno)
            )

    if table.dropped:
        logger.warning(f"Dropped {table.dropped} rating rows with a missing join key")
    logger.info(
        f"Loaded {len(table.records)} ratings ({len(table.users)} users, "
        f"{len(table.items)} items, {vocab.size} features) from {ratings_path}"
    )
    return table


def to_implicit(
    table: InteractionTable,
    threshold: float = 3.0,
    mode: Literal["threshold", "all_rated"] = "threshold",
) -> List[DataSample]:
    """Keeps positives only: ratings strictly above threshold, or every rated row."""
    positives = []
    for record in table.records:
        if mode == "all_rated" or record.rating > threshold:
            positives.append(
                DataSample(
                    features=record.features,
                    label=1,
                    user=table.users[record.user],
                    item=table.items[record.item],
                )
            )
    logger.info(f"{len(positives)} positives out of {len(table.records)} ratings ({mode})")
    return positives


@dataclass
class NegativeSampling:
    negatives: List[DataSample]
    fallback_users: int = 0


def sample_negatives(
    positives: Sequence[DataSample],
    table: InteractionTable,
    rng: np.random.Generator,
) -> NegativeSampling:
    """
    Draws, per user, as many unrated items as that user has positives, without replacement.

    Users whose unrated pool is too small are sampled with replacement (from the full item
    pool when nothing is unrated) and counted.
    """
    user_names = {index: name for name, index in table.users.items()}
    item_names = {index: name for name, index in table.items.items()}
    pool = np.array(sorted(table.items.values()), dtype=np.int64)
    counts: Dict[int, int] = {}
    for sample in positives:
        counts[sample.user] = counts.get(sample.user, 0) + 1

    result = NegativeSampling(negatives=[])
    for user in sorted(counts):
        wanted = counts[user]
        rated = table.rated.get(user, set())
        unrated = np.setdiff1d(pool, np.fromiter(rated, dtype=np.int64, count=len(rated)))
        if len(unrated) >= wanted:
            drawn = rng.choice(unrated, size=wanted, replace=False)
        else:
            result.fallback_users += 1
            source = unrated if len(unrated) else pool
            drawn = rng.choice(source, size=wanted, replace=True)
        for item in drawn:
            item = int(item)
            result.negatives.append(
                DataSample(
                    features=table.features_for(user_names[user], item_names[item]),
                    label=0,
                    user=user,
                    item=item,
                )
            )

    if result.fallback_users:
        logger.warning(
            f"{result.fallback_users} users had too few unrated items; sampled with replacement"
        )
    return result


@dataclass
class Split:
    train: List[DataSample]
    val: List[DataSample]
    test: List[DataSample]


def split(
    samples: Sequence[DataSample],
    ratios: Tuple[float, float, float],
    rng: np.random.Generator,
) -> Split:
    if any(r < 0 for r in ratios) or abs(float(np.sum(ratios)) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be nonnegative and sum to 1, got {ratios}")
    n = len(samples)
    order = rng.permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    picked = [samples[i] for i in order]
    return Split(
        train=picked[:n_train],
        val=picked[n_train : n_train + n_val],
        test=picked[n_train + n_val :],
    )


def make_batches(
    samples: Sequence[DataSample],
    batch_size: int,
    stratify: bool,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """
    Yields shuffled batches. With stratify on, each batch starts with one sample of each label
    while both labels remain, and the rest is filled in proportion to what is left.
    """
    if stratify and batch_size < 2:
        raise ValueError("stratified batches need batch_size >= 2")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")

    if not stratify:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            yield _to_batch([samples[i] for i in order[start : start + batch_size]])
        return

    pos = [samples[i] for i in rng.permutation(len(samples)) if samples[i].label == 1]
    neg = [s for s in (samples[i] for i in rng.permutation(len(samples))) if s.label == 0]
    while pos or neg:
        chunk: List[DataSample] = []
        if pos and neg:
            chunk += [pos.pop(), neg.pop()]
        while len(chunk) < batch_size and (pos or neg):
            take_pos = rng.random() < len(pos) / (len(pos) + len(neg))
            chunk.append(pos.pop() if take_pos else neg.pop())
        order = rng.permutation(len(chunk))
        yield _to_batch([chunk[i] for i in order])


def _to_batch(samples: List[DataSample]) -> Batch:
    return Batch(
        samples=samples,
        positive_idx=[i for i, s in enumerate(samples) if s.label == 1],
        negative_idx=[i for i, s in enumerate(samples) if s.label == 0],
    )


def collate(samples: Sequence[DataSample]) -> NodeSet:
    lengths = [s.m for s in samples]
    return NodeSet(
        feature_ids=np.array([fid for s in samples for fid, _ in s.features], dtype=np.int64),
        values=np.array([v for s in samples for _, v in s.features], dtype=np.float64),
        offsets=np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        labels=np.array([s.label for s in samples], dtype=np.float64),
        users=np.array([s.user for s in samples], dtype=np.int64),
    )


# --- Pipeline and cache ---


def prepare_dataset(schema: DataSchema, seed: int) -> Dataset:
    table = load_interactions(schema)
    positives = to_implicit(table, schema.rating_threshold, schema.implicit_mode)
    sampled = sample_negatives(positives, table, np.random.default_rng([seed, 1]))
    table.vocab.freeze()
    parts = split(
        positives + sampled.negatives,
        (schema.train_ratio, schema.val_ratio, schema.test_ratio),
        np.random.default_rng([seed, 2]),
    )
    return Dataset(
        vocab=table.vocab,
        train=parts.train,
        val=parts.val,
        test=parts.test,
        meta={
            "records": len(table.records),
            "dropped": table.dropped,
            "positives": len(positives),
            "negatives": len(sampled.negatives),
            "fallback_users": sampled.fallback_users,
        },
    )


def check_feature_ids(
    samples: Sequence[DataSample], num_features: int, source: str = "samples"
) -> None:
    """Raises VocabularyError for any feature id outside 0..num_features-1."""
    for n, sample in enumerate(samples):
        for fid, _ in sample.features:
            if not 0 <= fid < num_features:
                raise VocabularyError(
                    f"{source}: sample {n} has feature id {fid}, vocabulary size is {num_features}",
                    sample=n,
                    feature_id=fid,
                    vocab_size=num_features,
                )


def save_dataset(path: str | Path, dataset: Dataset, header: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [DATA_MAGIC, header or "#", f"meta\t{dumps(dataset.meta)}"]
    lines.append(f"vocab\t{dataset.vocab.size}")
    lines += [f"{i}\t{name}" for i, name in enumerate(dataset.vocab.names)]
    for split_name, samples in dataset.splits().items():
        lines.append(f"split\t{split_name}\t{len(samples)}")
        for s in samples:
            feats = ",".join(f"{fid}:{value!r}" for fid, value in s.features)
            lines.append(f"{s.user}\t{s.item}\t{s.label}\t{feats}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"dataset file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != DATA_MAGIC:
        raise ArtifactError(f"{path} is not a {DATA_MAGIC} dataset file")
    pos = 2
    meta: Dict[str, int] = {}
    if pos < len(lines) and lines[pos].startswith("meta\t"):
        meta = json.loads(lines[pos].split("\t", 1)[1])
        pos += 1
    _, size = lines[pos].split("\t")
    names = [lines[pos + 1 + i].split("\t", 1)[1] for i in range(int(size))]
    pos += 1 + int(size)
    parts: Dict[str, List[DataSample]] = {}
    while pos < len(lines):
        _, split_name, count = lines[pos].split("\t")
        samples = []
        for row in lines[pos + 1 : pos + 1 + int(count)]:
            user, item, label, feats = row.split("\t")
            features = tuple(
                (int(fid), float(value))
                for fid, value in (token.split(":") for token in feats.split(","))
            )
            samples.append(DataSample(features, int(label), int(user), int(item)))
        check_feature_ids(samples, len(names), source=f"{path} split {split_name}")
        parts[split_name] = samples
        pos += 1 + int(count)
    return Dataset(
        vocab=FeatureVocab(names).freeze(),
        train=parts.get("train", []),
        val=parts.get("val", []),
        test=parts.get("test", []),
        meta=meta,
    )


def _file_digest(path: Optional[str]) -> Optional[str]:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cached_dataset(schema: DataSchema, seed: int, cache_dir: Optional[Path] = None) -> Dataset:
    """prepare_dataset keyed by schema, seed and input file contents."""
    key = config_hash(
        {
            "schema": schema.model_dump(),
            "seed": seed,
            "files": [
                _file_digest(p)
                for p in (schema.ratings_path, schema.user_features_path, schema.item_features_path)
            ],
        }
    )
    cache_file = (cache_dir or get_cache_dir()) / "datasets" / f"{key}.hirsdata"
    if cache_file.exists():
        logger.info(f"Dataset found in local cache: {cache_file}")
        return load_dataset(cache_file)
    logger.info("Dataset not in cache. Preparing from source files...")
    dataset = prepare_dataset(schema, seed)
    save_dataset(cache_file, dataset)
    return dataset
