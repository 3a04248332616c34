import numpy as np
import pytest
from scipy.special import expit

from src.common.errors import AblationDirectionError, ConfigError
from src.services.synthbench import (
    PlantedInteraction,
    PlantedSpec,
    VariantSummary,
    ablation_suite,
    bayes_accuracy,
    direction_violations,
    generate,
    interaction_fit_check,
    load_planted_spec,
    parse_planted_spec,
    random_gate_baseline,
    recovery_score,
)
from src.services.trainer import TrainConfig
from tests.conftest import REPO_ROOT

SPEC_TEXT = """
# three planted terms
m=10
noise=0.5
n_samples=500
interaction: 0,1 coeff: 3.0
interaction: 4, 2, 3 coeff: -2.5
interaction: 5,6 coeff: 1e0
"""


class TestSpecFile:
    def test_parse(self):
        spec = parse_planted_spec(SPEC_TEXT)
        assert spec.m == 10
        assert spec.noise == 0.5
        assert [q.members for q in spec.interactions] == [(0, 1), (2, 3, 4), (5, 6)]
        assert [q.coeff for q in spec.interactions] == [3.0, -2.5, 1.0]
        assert spec.planted_features.tolist() == [True] * 7 + [False] * 3

    def test_bundled_spec_loads(self):
        spec = load_planted_spec(REPO_ROOT / "configs" / "synth.spec")
        assert len(spec.interactions) == 3

    @pytest.mark.parametrize(
        "text",
        [
            "m=4\ninteraction: 1 coeff: 2.0",
            "m=4\ninteraction: 1,1 coeff: 2.0",
            "m=4\ninteraction: 1,9 coeff: 2.0",
            "m=4\ninteraction: 1,2 coeff: 2\ninteraction: 2,1 coeff: 1",
            "m=4\ninteraction: one,two",
            "m=4\nwidth=3",
        ],
    )
    def test_invalid_specs(self, text):
        with pytest.raises(ConfigError):
            parse_planted_spec(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_planted_spec(tmp_path / "nope.spec")


class TestGeneration:
    def test_values_and_labels(self, small_spec):
        data = generate(small_spec, 300, np.random.default_rng(0))
        assert data.values.shape == (300, 6)
        assert set(np.unique(data.values).tolist()) == {-1.0, 1.0}
        first = data.samples[0]
        assert [fid for fid, _ in first.features] == list(range(6))
        assert data.vocab.names == [f"f{i}" for i in range(6)]
        np.testing.assert_allclose(
            data.logits, 3.0 * data.values[:, 0] * data.values[:, 1] - 2.5 * data.values[:, 2:5].prod(axis=1)
        )

    def test_same_seed_same_data(self, small_spec):
        a = generate(small_spec, 50, np.random.default_rng(3))
        b = generate(small_spec, 50, np.random.default_rng(3))
        assert a.samples == b.samples

    def test_strong_interaction_decides_labels(self):
        spec = PlantedSpec(m=3, interactions=[PlantedInteraction(members=(0, 2), coeff=40.0)])
        data = generate(spec, 200, np.random.default_rng(0))
        agree = data.values[:, 0] * data.values[:, 2] > 0
        assert np.array_equal(agree.astype(int), [s.label for s in data.samples])

    def test_bayes_accuracy_single_pair(self):
        spec = PlantedSpec(m=4, interactions=[PlantedInteraction(members=(1, 2), coeff=3.0)])
        assert bayes_accuracy(spec) == pytest.approx(float(expit(3.0)))

    def test_bayes_accuracy_without_signal(self):
        assert bayes_accuracy(PlantedSpec(m=4)) == 0.5


class TestRecovery:
    def test_planted_gates_recover_perfectly(self):
        spec = parse_planted_spec(SPEC_TEXT)
        data = generate(spec, 20, np.random.default_rng(0))
        gates = [data.planted_incidence()] * 20
        report = recovery_score(gates, spec)
        assert report.auc == 1.0
        assert report.jaccard == [1.0, 1.0, 1.0]
        assert report.coactivation == [1.0, 1.0, 1.0]
        assert report.order_tv_distance == 0.0
        assert "project-defined" in report.to_dict()["note"]

    def test_random_gates_are_near_chance(self):
        spec = parse_planted_spec(SPEC_TEXT)
        baseline = random_gate_baseline(spec, 0.3, 8, 100, np.random.default_rng(0))
        assert baseline["auc"] == pytest.approx(0.5, abs=0.15)
        assert baseline["mean_jaccard"] < 1.0

    def test_direction_checks(self):
        def summary(name, acc, empty, order):
            return VariantSummary(name, accuracy=[acc], empty_fraction=[empty], mean_order=[order])

        good = {
            "full": summary("full", 0.90, 0.2, 2.0),
            "no_mi": summary("no_mi", 0.85, 0.4, 2.0),
            "no_l0": summary("no_l0", 0.88, 0.1, 3.0),
            "no_hp+no_nm": summary("no_hp+no_nm", 0.60, 0.0, 6.0),
        }
        assert direction_violations(good) == []
        bad = dict(good, no_mi=summary("no_mi", 0.95, 0.1, 2.0))
        assert direction_violations(bad) == [
            "full < no_mi on accuracy",
            "no_mi empty-edge fraction not above full",
        ]

    def test_strict_suite_raises_on_violation(self, monkeypatch, small_spec):
        from src.services import synthbench

        monkeypatch.setattr(synthbench, "direction_violations", lambda *a, **k: ["made up"])
        cfg = TrainConfig(d=4, k=3, hidden=6, batch_size=32, epochs=1)
        spec = small_spec.model_copy(update={"n_samples": 120})
        with pytest.raises(AblationDirectionError):
            ablation_suite(spec, cfg, seeds=(0,), variants=("full",))
        report = ablation_suite(spec, cfg, seeds=(0,), variants=("full",), strict=False)
        assert report.violations == ["made up"]
        assert len(report.variants["full"].accuracy) == 1


@pytest.mark.slow
def test_nonlinear_edges_fit_a_product():
    report = interaction_fit_check()
    assert report.mse_nonlinear < 0.01
    # a linear edge model can only reach the variance of x_a * x_b
    assert report.mse_linear > 0.9


@pytest.mark.slow
def test_ablation_directions_and_recovery():
    spec = load_planted_spec(REPO_ROOT / "configs" / "synth.spec")
    assert spec.n_samples == 20000
    cfg = TrainConfig(d=16, k=8, hidden=32, batch_size=256, epochs=8, lr=0.005)
    report = ablation_suite(spec, cfg, seeds=(0, 1, 2), workers=3, strict=False)
    assert report.violations == []
    full = report.variants["full"]
    aucs = [r.auc for r in full.recovery]
    assert float(np.median(aucs)) >= report.random_baseline["auc"] + 0.2


@pytest.mark.slow
def test_full_model_is_near_bayes_on_a_single_pair():
    spec = PlantedSpec(
        m=4, n_samples=4000, interactions=[PlantedInteraction(members=(0, 1), coeff=3.0)]
    )
    cfg = TrainConfig(d=16, k=4, hidden=32, batch_size=128, epochs=20, lr=0.01)
    report = ablation_suite(spec, cfg, seeds=(0,), variants=("full",), strict=False)
    assert report.bayes_accuracy == pytest.approx(float(expit(3.0)))
    assert report.bayes_accuracy - report.variants["full"].median("accuracy") <= 0.05
