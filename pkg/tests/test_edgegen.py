import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.common import numerics as nx
from src.common.errors import ShapeError
from src.common.gradcheck import gradcheck
from src.services.data import DataSample, collate
from src.services.edgegen import (
    HardConcreteConfig,
    eval_gates,
    expected_nonzero,
    format_gate_matrix,
    init_edgegen_params,
    l0_penalty,
    logalpha_for_sample,
    node_context_logalpha,
    sample_gates,
    split_gate_matrices,
)

HC = HardConcreteConfig()
OPEN_PROBABILITY = 1.0 / (1.0 + math.exp(-0.66 * math.log(11.0)))


def _param_nodes(params):
    return {name: nx.parameter(value, name) for name, value in params.items()}


class TestHardConcrete:
    def test_open_probability_constant(self):
        assert OPEN_PROBABILITY == pytest.approx(0.8296, abs=1e-4)

    @pytest.mark.parametrize(
        "value, expected", [(-2.0, 0.3971), (0.0, 0.8296), (2.0, 0.97295)]
    )
    def test_monte_carlo_matches_closed_form(self, value, expected):
        logalpha = nx.constant(np.full((1000, 100), value))
        gates = sample_gates(logalpha, HC, rng=np.random.default_rng(0))
        closed_form = float(expected_nonzero(value, HC))
        assert closed_form == pytest.approx(expected, abs=1e-4)
        assert np.mean(gates.value > 0) == pytest.approx(closed_form, abs=0.01)

    def test_l0_of_single_entry(self):
        penalty = l0_penalty(nx.constant(np.zeros((1, 1))), HC)
        assert penalty.item() == pytest.approx(0.8296, abs=1e-4)
        assert float(expected_nonzero(0.0, HC)) == pytest.approx(penalty.item())

    def test_gates_stay_in_unit_interval(self):
        logalpha = nx.constant(np.random.default_rng(1).normal(0, 3, size=(50, 8)))
        gates = sample_gates(logalpha, HC, rng=np.random.default_rng(2))
        assert gates.value.min() >= 0.0
        assert gates.value.max() <= 1.0
        # the stretch puts real mass on both exact ends
        assert np.any(gates.value == 0.0)
        assert np.any(gates.value == 1.0)

    def test_eval_gates_are_deterministic(self):
        logalpha = nx.constant(np.array([[0.0, 50.0, -50.0]]))
        assert eval_gates(logalpha, HC).value.tolist() == [[pytest.approx(0.5), 1.0, 0.0]]

    def test_fixed_noise_freezes_the_draw(self):
        logalpha = nx.constant(np.zeros((2, 3)))
        noise = np.full((2, 3), 0.5)
        gates = sample_gates(logalpha, HC, noise=noise)
        np.testing.assert_allclose(gates.value, 0.5)

    def test_needs_rng_or_noise(self):
        with pytest.raises(ValueError):
            sample_gates(nx.constant(np.zeros((1, 1))), HC)

    def test_noise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sample_gates(nx.constant(np.zeros((2, 2))), HC, noise=np.full((2, 3), 0.5))

    def test_invalid_stretch(self):
        with pytest.raises(ValidationError):
            HardConcreteConfig(gamma=0.1)
        with pytest.raises(ValidationError):
            HardConcreteConfig(tau=0.0)

    def test_gradient_through_gates(self):
        noise = np.random.default_rng(3).uniform(0.2, 0.8, size=(4, 3))

        def loss(p):
            gates = sample_gates(p["la"], HC, noise=noise)
            return nx.add(nx.sum(nx.mul(gates, gates)), l0_penalty(p["la"], HC))

        report = gradcheck(loss, {"la": np.random.default_rng(4).normal(0, 0.3, size=(4, 3))})
        assert report.passed


class TestGenerator:
    def test_shape_follows_nodes_and_k(self):
        params = init_edgegen_params(8, d=4, k=5, hidden=6, rng=np.random.default_rng(0))
        samples = [
            DataSample(((0, 1.0), (3, 1.0)), 1, 0),
            DataSample(((1, 1.0), (2, -1.0), (7, 0.5)), 0, 1),
        ]
        logalpha = node_context_logalpha(collate(samples), _param_nodes(params))
        assert logalpha.shape == (5, 5)

    def test_rows_follow_feature_order(self):
        params = _param_nodes(init_edgegen_params(8, 4, 3, 6, np.random.default_rng(0)))
        forward = logalpha_for_sample(DataSample(((0, 1.0), (4, 1.0), (6, -1.0)), 1, 0), params)
        reverse = logalpha_for_sample(DataSample(((6, -1.0), (4, 1.0), (0, 1.0)), 1, 0), params)
        np.testing.assert_allclose(forward.value, reverse.value[::-1], atol=1e-12)

    def test_batch_rows_match_single_sample_rows(self):
        params = _param_nodes(init_edgegen_params(8, 4, 3, 6, np.random.default_rng(0)))
        samples = [DataSample(((0, 1.0), (4, 1.0)), 1, 0), DataSample(((5, 1.0), (2, 1.0)), 0, 1)]
        batch = node_context_logalpha(collate(samples), params).value
        np.testing.assert_allclose(batch[2:], logalpha_for_sample(samples[1], params).value)

    def test_split_gate_matrices(self):
        samples = [DataSample(((0, 1.0),), 1, 0), DataSample(((1, 1.0), (2, 1.0)), 0, 1)]
        gates = np.arange(9, dtype=float).reshape(3, 3)
        matrices = split_gate_matrices(gates, collate(samples), mode="eval")
        assert [g.m for g in matrices] == [1, 2]
        assert matrices[1].values.tolist() == gates[1:].tolist()

    def test_format_gate_matrix(self):
        text = format_gate_matrix(np.array([[1.0, 0.25], [0.0, 0.5]]), ["a", "b"])
        assert text == "a\t1.000 0.250\nb\t0.000 0.500\n"
