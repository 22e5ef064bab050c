import numpy as np
import pytest

from cotlab.grads import tf_loss_and_grad
from cotlab.model import AttentionWeights, FilterConfig, make_layout, pattern_weights, run_chain
from cotlab.task import build_instance, build_tree, enumerate_inputs, ground_truth_labels, sample_inputs
from cotlab.training import (
    DataSpec,
    EpochRecord,
    Regime,
    Trace,
    TrainConfig,
    _ball_noise,
    child_mass,
    cot_loss,
    default_eta,
    evaluate,
    pred_loss,
    train,
)


@pytest.fixture(scope="module")
def setup():
    tree = build_tree(build_instance(16, 8, target=[1, 4, 6, 7, 9, 12, 13, 15]))
    data = ground_truth_labels(tree, sample_inputs(16, 512, 0, width=tree.size))
    return tree, data, DataSpec(16, 8, 512)


class TestConfig:
    def test_default_eta(self):
        assert default_eta("cot", 8) == 15.0
        assert default_eta(Regime.COT_SC, 32) == 100.0
        assert default_eta("direct", 16) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            default_eta("cot", 4)

    def test_mask_kinds(self):
        assert Regime.COT_TF.mask_kind.value == "causal" and Regime.DIRECT.mask_kind.value == "causal"
        assert Regime.COT.mask_kind.value == "block" and Regime.COT_SC.mask_kind.value == "block"

    def test_sc_defaults(self, setup):
        cfg = TrainConfig.for_regime("cot_sc", setup[2])
        assert cfg.filter == FilterConfig.weight(0.4) and cfg.loss_mix == 0.1
        assert cfg.to_json()["filter"]["mode"] == "weight"

    @pytest.mark.parametrize("kw", [dict(eta=-1.0), dict(eta=float("nan")), dict(loss_mix=0.5), dict(filter=FilterConfig.weight()),
                                    dict(loss_mix=1.5, regime="cot_sc")])
    def test_rejects(self, setup, kw):
        base = dict(regime="cot", eta=1.0, epochs=1, data=setup[2])
        base.update(kw)
        with pytest.raises(ValueError):
            TrainConfig(**base)


class TestLosses:
    def test_zero_prediction_gives_half(self, setup):
        # the weight filter zeroes every closed level, so yhat is exactly 0
        tree, data, _ = setup
        w = AttentionWeights.zeros(tree, "block")
        assert pred_loss(w, data, tree, filt=FilterConfig.weight(0.4)) == 0.5

    def test_pred_loss_formula(self, setup):
        tree, data, _ = setup
        w = AttentionWeights.zeros(tree, "causal").with_w(np.random.default_rng(1).normal(size=(23, 23)))
        chain = run_chain(data.tokens, w.scores(), make_layout(w.mask, 16, tree))
        expect = np.mean((chain.x[:, -1] - data.tokens[:, -1]) ** 2) / 2
        assert pred_loss(w, data, tree) == pytest.approx(expect, rel=1e-12)

    def test_all_minus_one_prediction(self, setup):
        # (1/2n) sum (-1 - y)^2 = 2 * P(y = +1), about 1 for balanced labels
        tree, data, _ = setup
        y = data.tokens[:, -1]
        loss = 0.5 * np.mean((-1 - y) ** 2)
        assert abs(loss - 1.0) < 0.1

    def test_scaled_cot(self, setup):
        tree, data, _ = setup
        w = AttentionWeights.zeros(tree, "block")
        assert cot_loss(w, data, tree, scaled=True) == pytest.approx(cot_loss(w, data, tree) / 7, rel=1e-12)
        tf = AttentionWeights.zeros(tree, "causal")
        assert cot_loss(tf, data, tree, teacher_forcing=True) == pytest.approx(tf_loss_and_grad(tf, data, 16)[0])

    def test_child_mass(self, setup):
        tree = setup[0]
        np.testing.assert_allclose(child_mass(AttentionWeights.zeros(tree, "causal"), tree), 2 / np.arange(16, 23))
        assert np.all(child_mass(pattern_weights(tree, "block", 40.0), tree) > 0.999)


class TestTrain:
    @pytest.mark.parametrize("regime", list(Regime))
    def test_zero_rate_is_constant(self, setup, regime):
        tree, data, spec = setup
        trace = train(TrainConfig.for_regime(regime, spec, epochs=5, eta=0.0), data, None, tree)
        assert len(trace.records) == 6
        assert len(set(trace.column("cot_loss"))) == 1 and len(set(trace.column("pred_loss"))) == 1
        assert np.all(trace.weights.w == 0)

    def test_deterministic(self, setup):
        tree, data, spec = setup
        cfg = TrainConfig.for_regime("cot", spec, epochs=10, eta=15.0, oracle_eps=0.01)
        a, b = train(cfg, data, None, tree), train(cfg, data, None, tree)
        np.testing.assert_array_equal(a.weights.w, b.weights.w)
        np.testing.assert_array_equal(a.column("cot_loss"), b.column("cot_loss"))

    def test_teacher_forcing_learns(self, setup):
        tree, data, spec = setup
        trace = train(TrainConfig.for_regime("cot_tf", spec, epochs=150, eta=15.0), data, None, tree)
        losses = trace.column("cot_loss")
        assert losses[-1] < 0.1 * losses[0]
        assert trace.final.child_mass_mean > trace.records[0].child_mass_mean

    def test_hook_replaces_gradient(self, setup):
        tree, data, spec = setup
        trace = train(TrainConfig.for_regime("cot", spec, epochs=3, eta=15.0), data, None, tree,
                      gradient_hook=lambda g, w: np.zeros_like(g))
        assert np.all(trace.weights.w == 0)

    def test_quantized_steps_are_integral(self, setup):
        tree, data, spec = setup
        trace = train(TrainConfig.for_regime("cot_tf", spec, epochs=3, eta=500.0, quantize_every_step=True), data, None, tree)
        assert np.all(trace.weights.w == np.round(trace.weights.w))

    def test_token_filter_needs_augmented(self, setup):
        tree, data, spec = setup
        with pytest.raises(ValueError):
            train(TrainConfig.for_regime("cot_sc", spec, epochs=1, filter=FilterConfig.token(0.5)), data, None, tree)

    def test_sc_filter_flags(self, setup):
        tree, data, spec = setup
        trace = train(TrainConfig.for_regime("cot_sc", spec, epochs=2), data, None, tree)
        assert trace.records[0].filter_active == [False, True, True]


class TestTrace:
    def test_deactivation_epochs(self):
        recs = [EpochRecord(e, 0.0, 0.0, [False, e < 3, True], 0.0) for e in range(6)]
        assert Trace(recs, None).deactivation_epochs() == [0, 3, None]
        assert Trace([], None).deactivation_epochs() == []


class TestEvaluate:
    def test_solved_pattern(self, setup):
        tree = setup[0]
        fresh = sample_inputs(16, 1000, 5, width=tree.size)
        rep = evaluate(pattern_weights(tree, "block", 40.0), tree, fresh)
        assert rep.max_abs_err < 1e-9 and rep.mean_zero_one_err == 0.0

    def test_untrained(self, setup):
        tree = setup[0]
        rep = evaluate(AttentionWeights.zeros(tree, "block"), tree, enumerate_inputs(16, width=tree.size))
        assert rep.mean_zero_one_err > 0.3


class TestOracleNoise:
    def test_within_ball(self):
        rng = np.random.default_rng(0)
        mask = np.zeros((5, 5), dtype=bool)
        mask[0] = True
        for _ in range(50):
            e = _ball_noise(rng, np.zeros((5, 5)), mask, 0.3)
            assert np.linalg.norm(e) <= 0.3 + 1e-12 and np.all(e[0] == 0)
