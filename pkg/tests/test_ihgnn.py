from math import comb

import numpy as np
import pytest

from src.common import numerics as nx
from src.common.errors import OracleMismatchError
from src.common.gradcheck import gradcheck
from src.services import ihgnn
from src.services.data import DataSample, collate
from src.services.ihgnn import (
    FixedIncidence,
    build_deepfm_incidence,
    build_fm_incidence,
    build_l0sign_incidence,
    check_oracle_batch,
    fixed_incidence_logit,
    fm_oracle_equivalence,
    format_incidence,
    ihgnn_forward,
    init_classic_params,
    init_ihgnn_params,
    l0sign_forward,
)
from tests.conftest import random_samples


def _nodes(params):
    return {name: nx.parameter(value, name) for name, value in params.items()}


class TestForward:
    def test_zero_gates_give_the_readout_bias(self):
        params = init_ihgnn_params(6, d=4, hidden=5, rng=np.random.default_rng(0))
        params["readout.b"] = np.array([0.3])
        nodes = collate([DataSample(((0, 1.0), (2, 1.0), (4, -1.0)), 1, 0)])
        out = ihgnn_forward(nodes, nx.constant(np.zeros((3, 4))), _nodes(params))
        assert np.all(out.node_patch.value == 0.0)
        assert out.logits.value.tolist() == [pytest.approx(0.3)]

    def test_node_order_does_not_change_the_score(self):
        rng = np.random.default_rng(1)
        params = _nodes(init_ihgnn_params(8, 4, 5, rng))
        features = ((0, 1.0), (3, 0.5), (5, -1.0), (7, 1.0))
        gates = rng.uniform(0, 1, size=(4, 6))
        perm = [2, 0, 3, 1]
        a = ihgnn_forward(collate([DataSample(features, 1, 0)]), nx.constant(gates), params)
        b = ihgnn_forward(
            collate([DataSample(tuple(features[i] for i in perm), 1, 0)]),
            nx.constant(gates[perm]),
            params,
        )
        assert a.logits.item() == pytest.approx(b.logits.item(), abs=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        params = _nodes(init_ihgnn_params(10, 4, 5, rng))
        samples = random_samples(10, 3, rng)
        gates = rng.uniform(0, 1, size=(sum(s.m for s in samples), 3))
        batched = ihgnn_forward(collate(samples), nx.constant(gates), params)
        start = samples[0].m
        single = ihgnn_forward(
            collate(samples[1:2]), nx.constant(gates[start : start + samples[1].m]), params
        )
        assert batched.logits.value[1] == pytest.approx(single.logits.item(), abs=1e-12)
        part = batched.for_sample(1, collate(samples), 3)
        np.testing.assert_allclose(part["h"], single.h.value, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        samples = random_samples(6, 3, rng, max_m=4)
        nodes = collate(samples)
        gates = nx.constant(rng.uniform(0.1, 0.9, size=(nodes.num_nodes, 3)))
        params = init_ihgnn_params(6, 3, 4, rng)

        def loss(p):
            out = ihgnn_forward(nodes, gates, p)
            return nx.bce_with_logits(out.logits, nodes.labels)

        assert gradcheck(loss, params).passed


class TestIncidences:
    def test_fm_column_order(self):
        inc = build_fm_incidence(3)
        assert inc.incidence.T.tolist() == [
            [1, 1, 0],
            [1, 0, 1],
            [0, 1, 1],
            [1, 0, 0],
            [0, 1, 0],
            [0, 0, 1],
        ]
        assert inc.readout_kind == "sum"

    @pytest.mark.parametrize("m", [1, 2, 5, 9])
    def test_deepfm_column_count(self, m):
        inc = build_deepfm_incidence(m)
        assert inc.k == comb(m, 2) + m + 1
        assert inc.column_kinds[-1] == "mlp"
        assert inc.degrees[-1] == m
        assert set(inc.degrees[:-1].tolist()) <= {1, 2}

    def test_degree_checked_for_dot_columns(self):
        with pytest.raises(ValueError):
            FixedIncidence(np.ones((3, 1)), ("dot",), "sum")

    def test_l0sign_needs_two_features(self):
        with pytest.raises(ValueError):
            build_l0sign_incidence(1)
        assert build_l0sign_incidence(4).k == 6

    def test_format_incidence(self):
        assert format_incidence(build_fm_incidence(2), ["a", "b"]).startswith("a\t1.000 1.000 0.000")


class TestOracles:
    @pytest.mark.parametrize("mode", ["fm", "nfm", "deepfm"])
    def test_incidence_scores_match_direct_formulas(self, mode):
        rng = np.random.default_rng(7)
        for d in (1, 8, 16):
            params = init_classic_params(20, d, 12, rng)
            samples = random_samples(20, 300, rng, min_m=1, max_m=10)
            report = check_oracle_batch(samples, params, mode, tolerance=1e-9)
            assert report.max_abs_diff < 1e-9

    def test_single_sample_pair(self):
        params = init_classic_params(10, 8, 6, np.random.default_rng(0))
        sample = random_samples(10, 1, np.random.default_rng(1), min_m=5, max_m=5)[0]
        ours, oracle = fm_oracle_equivalence(sample, params, "fm")
        assert abs(ours - oracle) < 1e-9

    def test_mismatch_is_reported(self, monkeypatch):
        params = init_classic_params(10, 4, 6, np.random.default_rng(0))
        samples = random_samples(10, 5, np.random.default_rng(1))
        monkeypatch.setitem(
            ihgnn._CLASSIC, "fm", (build_fm_incidence, lambda s, p: ihgnn.direct_fm_score(s, p) + 1.0)
        )
        with pytest.raises(OracleMismatchError):
            check_oracle_batch(samples, params, "fm")

    def test_l0sign_forward(self):
        rng = np.random.default_rng(4)
        params = _nodes(init_ihgnn_params(10, 4, 5, rng))
        outputs = l0sign_forward(random_samples(10, 3, rng), params)
        assert len(outputs) == 3
        for out in outputs:
            assert 0.0 < out.probabilities.item() < 1.0

    def test_zero_embeddings_score_the_bias(self):
        params = init_classic_params(10, 4, 6, np.random.default_rng(0))
        params["cm.emb"] = np.zeros_like(params["cm.emb"])
        params["cm.linear"] = np.zeros_like(params["cm.linear"])
        sample = random_samples(10, 1, np.random.default_rng(1), min_m=4, max_m=4)[0]
        ours, oracle = fm_oracle_equivalence(sample, params, "fm")
        assert ours == pytest.approx(params["cm.bias"][0], abs=1e-15)
        assert oracle == pytest.approx(params["cm.bias"][0], abs=1e-15)

    def test_classic_scores_use_the_network_edge_aggregation(self, monkeypatch):
        calls = []
        original = ihgnn.aggregate_edges

        def counting(nodes, gates, rows):
            calls.append(gates.shape)
            return original(nodes, gates, rows)

        monkeypatch.setattr(ihgnn, "aggregate_edges", counting)
        params = init_classic_params(10, 4, 6, np.random.default_rng(0))
        sample = random_samples(10, 1, np.random.default_rng(1), min_m=4, max_m=4)[0]
        fm_oracle_equivalence(sample, params, "deepfm")
        assert calls == [(4, comb(4, 2) + 4 + 1)] * 3

    @pytest.mark.parametrize("mode", ["fm", "nfm", "deepfm"])
    def test_fixed_incidence_gradients(self, mode):
        rng = np.random.default_rng(5)
        params = init_classic_params(8, 3, 4, rng)
        samples = random_samples(8, 3, rng, min_m=2, max_m=4)
        build = {
            "fm": build_fm_incidence,
            "nfm": ihgnn.build_nfm_incidence,
            "deepfm": build_deepfm_incidence,
        }[mode]

        def loss(p):
            logits = nx.concat([fixed_incidence_logit(s, build(s.m), p) for s in samples])
            return nx.bce_with_logits(logits, [s.label for s in samples])

        assert gradcheck(loss, params).passed

    def test_linear_readout_is_not_a_classic_model(self):
        params = _nodes(init_classic_params(10, 4, 6, np.random.default_rng(0)))
        sample = random_samples(10, 1, np.random.default_rng(1), min_m=3, max_m=3)[0]
        with pytest.raises(ValueError):
            fixed_incidence_logit(sample, build_l0sign_incidence(3), params)
