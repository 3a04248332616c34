from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.common.errors import ArtifactError, ParseError, VocabularyError
from src.services.data import (
    DataSample,
    DataSchema,
    FeatureVocab,
    cached_dataset,
    collate,
    load_dataset,
    load_interactions,
    make_batches,
    prepare_dataset,
    sample_negatives,
    save_dataset,
    split,
    to_implicit,
)


def _write(path: Path, lines) -> str:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def small_files(tmp_path):
    ratings = _write(
        tmp_path / "ratings.dat",
        ["1::10::5::0", "1::11::3::0", "2::10::4::0", "2::12::1::0", "3::13::5::0"],
    )
    users = _write(tmp_path / "users.dat", ["1::gender=F|age=25", "2::gender=M|age=25"])
    items = _write(
        tmp_path / "items.dat",
        ["10::genre=Drama", "11::genre=Comedy|year:0.5", "12::genre=Drama", "14::genre=Action"],
    )
    return DataSchema(ratings_path=ratings, user_features_path=users, item_features_path=items)


class TestLoading:
    def test_joins_and_drops_missing_keys(self, small_files):
        table = load_interactions(small_files)
        assert len(table.records) == 4
        assert table.dropped == 1
        first = table.records[0]
        names = [table.vocab.name_of(fid) for fid, _ in first.features]
        assert names == ["user=1", "item=10", "gender=F", "age=25", "genre=Drama"]

    def test_weighted_feature_token(self, small_files):
        table = load_interactions(small_files)
        record = table.records[1]
        weights = {table.vocab.name_of(fid): value for fid, value in record.features}
        assert weights["year"] == 0.5
        assert weights["genre=Comedy"] == 1.0

    def test_items_from_feature_file_join_the_pool(self, small_files):
        table = load_interactions(small_files)
        assert "14" in table.items

    def test_non_numeric_rating_reports_line(self, tmp_path):
        ratings = _write(tmp_path / "r.dat", ["1::10::5", "1::11::five"])
        with pytest.raises(ParseError) as info:
            load_interactions(DataSchema(ratings_path=ratings))
        assert info.value.details["line"] == 2

    def test_too_few_columns(self, tmp_path):
        ratings = _write(tmp_path / "r.dat", ["1::10"])
        with pytest.raises(ParseError):
            load_interactions(DataSchema(ratings_path=ratings))

    def test_empty_file(self, tmp_path):
        ratings = tmp_path / "r.dat"
        ratings.write_text("", encoding="utf-8")
        table = load_interactions(DataSchema(ratings_path=str(ratings)))
        assert table.records == []

    def test_threshold_is_strict(self, small_files):
        table = load_interactions(small_files)
        positives = to_implicit(table, threshold=3.0)
        assert sorted(s.item for s in positives) == [table.items["10"], table.items["10"]]
        assert len(to_implicit(table, mode="all_rated")) == 4


class TestNegatives:
    def test_one_unrated_negative_per_positive(self, small_files):
        table = load_interactions(small_files)
        positives = to_implicit(table, threshold=3.0)
        sampled = sample_negatives(positives, table, np.random.default_rng(0))
        assert len(sampled.negatives) == len(positives)
        assert sampled.fallback_users == 0
        for negative in sampled.negatives:
            assert negative.label == 0
            assert negative.item not in table.rated[negative.user]

    @pytest.mark.parametrize("seed", range(5))
    def test_only_the_unrated_item_is_drawn(self, tmp_path, seed):
        rows = [f"1::{item}::5" for item in "abcdefg"] + ["2::h::1"]
        table = load_interactions(DataSchema(ratings_path=_write(tmp_path / "r.dat", rows)))
        sampled = sample_negatives(to_implicit(table), table, np.random.default_rng(seed))
        items = {index: name for name, index in table.items.items()}
        user = table.users["1"]
        drawn = [items[n.item] for n in sampled.negatives if n.user == user]
        # seven positives, one unrated item: every draw repeats it
        assert drawn == ["h"] * 7
        assert sampled.fallback_users == 1

    def test_small_pool_falls_back_to_replacement(self, tmp_path):
        ratings = _write(tmp_path / "r.dat", ["1::a::5", "1::b::5", "2::c::5"])
        table = load_interactions(DataSchema(ratings_path=ratings))
        positives = to_implicit(table)
        sampled = sample_negatives(positives, table, np.random.default_rng(0))
        # user 1 has one unrated item for two positives
        assert sampled.fallback_users == 1
        assert len(sampled.negatives) == 3

    def test_deterministic_for_a_seed(self, small_files):
        table = load_interactions(small_files)
        positives = to_implicit(table)
        a = sample_negatives(positives, table, np.random.default_rng(5)).negatives
        b = sample_negatives(positives, table, np.random.default_rng(5)).negatives
        assert a == b


class TestSamplesAndBatches:
    def test_sample_validation(self):
        with pytest.raises(ValueError):
            DataSample((), 1, 0)
        with pytest.raises(ValueError):
            DataSample(((1, 1.0), (1, 0.5)), 1, 0)
        with pytest.raises(ValueError):
            DataSample(((1, 1.0),), 2, 0)

    def test_frozen_vocab(self):
        vocab = FeatureVocab(["a", "b"]).freeze()
        assert vocab.add("a") == 0
        with pytest.raises(VocabularyError):
            vocab.add("c")
        with pytest.raises(VocabularyError):
            vocab.id_of("c")

    def test_split_sizes(self):
        samples = [DataSample(((0, 1.0),), i % 2, i) for i in range(100)]
        parts = split(samples, (0.7, 0.15, 0.15), np.random.default_rng(0))
        assert (len(parts.train), len(parts.val), len(parts.test)) == (70, 15, 15)
        assert sorted(s.user for s in parts.train + parts.val + parts.test) == list(range(100))

    def test_split_ratios_must_sum_to_one(self):
        with pytest.raises(ValueError):
            split([], (0.5, 0.2, 0.2), np.random.default_rng(0))

    def test_stratified_batches_hold_both_labels(self):
        samples = [DataSample(((0, 1.0),), int(i < 30), i) for i in range(100)]
        batches = list(make_batches(samples, 8, stratify=True, rng=np.random.default_rng(0)))
        seen = sorted(s.user for b in batches for s in b.samples)
        assert seen == list(range(100))
        mixed = [b for b in batches if not b.single_label]
        # every batch drawn while positives remain gets one of each label
        assert len(mixed) >= 4
        assert all(len(b) <= 8 for b in batches)

    def test_stratified_batch_size_one(self):
        with pytest.raises(ValueError):
            list(make_batches([], 1, stratify=True, rng=np.random.default_rng(0)))

    def test_collate_offsets(self):
        samples = [
            DataSample(((3, 1.0), (4, 0.5)), 1, 0),
            DataSample(((1, 1.0),), 0, 1),
            DataSample(((2, 1.0), (0, 1.0), (5, -1.0)), 0, 2),
        ]
        nodes = collate(samples)
        assert nodes.offsets.tolist() == [0, 2, 3, 6]
        assert nodes.feature_ids.tolist() == [3, 4, 1, 2, 0, 5]
        assert nodes.segment_index().tolist() == [0, 0, 1, 2, 2, 2]
        assert nodes.edge_offsets(4).tolist() == [0, 4, 8, 12]


class TestPipeline:
    def test_prepare_sample_dataset(self, sample_dir):
        schema = DataSchema(
            ratings_path=str(sample_dir / "ratings.dat"),
            user_features_path=str(sample_dir / "users.dat"),
            item_features_path=str(sample_dir / "movies.dat"),
        )
        dataset = prepare_dataset(schema, seed=0)
        assert dataset.meta["positives"] == dataset.meta["negatives"] > 0
        total = len(dataset.train) + len(dataset.val) + len(dataset.test)
        assert total == dataset.meta["positives"] * 2
        assert dataset.vocab.frozen

    def test_saved_dataset_loads_back(self, tmp_path, tiny_dataset):
        path = save_dataset(tmp_path / "d.hirsdata", tiny_dataset, header="# hirs test")
        loaded = load_dataset(path)
        assert loaded.train == tiny_dataset.train
        assert loaded.test == tiny_dataset.test
        assert loaded.vocab.names == tiny_dataset.vocab.names

    def test_cached_dataset_keeps_its_counts(self, tmp_path, small_files):
        first = cached_dataset(small_files, seed=0, cache_dir=tmp_path / "cache")
        second = cached_dataset(small_files, seed=0, cache_dir=tmp_path / "cache")
        assert first.meta["positives"] > 0
        assert second.meta == first.meta

    def test_dataset_file_without_meta_line(self, tmp_path, tiny_dataset):
        path = save_dataset(tmp_path / "d.hirsdata", tiny_dataset)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[2].startswith("meta\t")
        path.write_text("\n".join(lines[:2] + lines[3:]) + "\n", encoding="utf-8")
        loaded = load_dataset(path)
        assert loaded.meta == {}
        assert loaded.train == tiny_dataset.train

    def test_out_of_vocabulary_id_in_dataset_file(self, tmp_path, tiny_dataset):
        size = tiny_dataset.vocab.size
        bad = DataSample(((0, 1.0), (size, 1.0)), 1, 0, 0)
        broken = replace(tiny_dataset, val=[bad] + tiny_dataset.val)
        path = save_dataset(tmp_path / "d.hirsdata", broken)
        with pytest.raises(VocabularyError) as info:
            load_dataset(path)
        assert info.value.details == {"sample": 0, "feature_id": size, "vocab_size": size}

    def test_bad_dataset_file(self, tmp_path):
        bogus = tmp_path / "x.hirsdata"
        bogus.write_text("nope\n", encoding="utf-8")
        with pytest.raises(ArtifactError):
            load_dataset(bogus)
        with pytest.raises(ArtifactError):
            load_dataset(tmp_path / "missing.hirsdata")

    def test_cache_is_keyed_and_reused(self, tmp_path, small_files):
        first = cached_dataset(small_files, seed=0, cache_dir=tmp_path / "cache")
        cached = list((tmp_path / "cache" / "datasets").glob("*.hirsdata"))
        assert len(cached) == 1
        second = cached_dataset(small_files, seed=0, cache_dir=tmp_path / "cache")
        assert second.train == first.train
        cached_dataset(small_files, seed=1, cache_dir=tmp_path / "cache")
        assert len(list((tmp_path / "cache" / "datasets").glob("*.hirsdata"))) == 2
