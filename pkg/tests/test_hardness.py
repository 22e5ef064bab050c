import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotlab.hardness import (
    DirectModel,
    OracleConfig,
    adversarial_oracle,
    enumerate_family,
    family_gradients,
    gram_delta,
    gram_matrix,
    hardness_demo,
    mean_parity_at_point,
    mean_parity_by_products,
    model_variance,
    variance_bound,
    variance_over_family,
)


def pm_inputs(n, d, seed=0):
    return np.random.default_rng(seed).choice([-1.0, 1.0], size=(n, d))


class TestFamily:
    def test_sizes(self):
        assert len(enumerate_family(4, 2)) == 6
        fam = enumerate_family(10, 5)
        assert len(fam) == 252 and fam.exhaustive
        assert fam.members[0] == (1, 2, 3, 4, 5) and fam.members[-1] == (6, 7, 8, 9, 10)

    def test_cap(self):
        with pytest.raises(ValueError):
            enumerate_family(32, 16)
        mc = enumerate_family(32, 16, cap=100, monte_carlo=True, seed=1)
        assert len(mc) == 100 and not mc.exhaustive
        assert len(set(mc.members)) == 100 and all(len(p) == 16 for p in mc.members)
        assert mc == enumerate_family(32, 16, cap=100, monte_carlo=True, seed=1)

    def test_rejects_k(self):
        with pytest.raises(ValueError):
            enumerate_family(4, 5)

    def test_evaluate(self):
        fam = enumerate_family(4, 2)
        x = np.array([[1, -1, -1, 1]])
        expect = [np.prod(x[0, [j - 1 for j in p]]) for p in fam.members]
        np.testing.assert_array_equal(fam.evaluate(x)[0], expect)


class TestGram:
    def test_properties(self):
        fam = enumerate_family(8, 4)
        g = gram_matrix(fam, pm_inputs(4096, 8))
        np.testing.assert_array_equal(np.diag(g), 1.0)
        np.testing.assert_allclose(g, g.T)
        assert np.linalg.eigvalsh(g).min() > -1e-9
        off = g - np.eye(len(fam))
        assert np.abs(off).max() <= gram_delta(8, 4096)

    def test_delta(self):
        assert gram_delta(10, 4096) == pytest.approx(math.sqrt(40 / 4096))


class TestVariance:
    def test_identical_gradients_have_zero_variance(self):
        assert variance_over_family(np.ones((5, 3))) == 0.0

    def test_formula(self):
        g = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert variance_over_family(g) == 1.0
        var, bound = variance_over_family(g, 2, 4, 64, 3.0)
        assert var == 1.0 and bound == variance_bound(2, 4, 64, 3.0) == 2 * 0.5 * 3.0

    def test_family_gradients_match_direct(self):
        rng = np.random.default_rng(0)
        f, jac = rng.normal(size=20), rng.normal(size=(20, 7))
        y = rng.choice([-1.0, 1.0], size=(20, 3))
        g = family_gradients(f, jac, y)
        for t in range(3):
            np.testing.assert_allclose(g[t], (f - y[:, t]) @ jac / 20)

    @pytest.mark.parametrize("scale", [0.0, 0.5])
    def test_model_within_bound(self, scale):
        model = DirectModel(8, 4)
        theta = np.random.default_rng(1).normal(0, scale, model.n_params)
        rep = model_variance(model, theta, enumerate_family(8, 4), pm_inputs(2048, 8))
        assert rep.variance <= rep.frame_bound * (1 + 1e-9) <= rep.bound
        assert rep.max_offdiag <= gram_delta(8, 2048)


class TestDirectModel:
    def test_shapes(self):
        model = DirectModel(6, 5)
        assert model.size == 10 and model.n_params == sum(range(6, 10))
        theta = np.random.default_rng(0).normal(size=model.n_params)
        np.testing.assert_array_equal(model.theta(model.weights(theta)), theta)

    def test_jacobian_matches_finite_differences(self):
        model = DirectModel(5, 3)
        rng = np.random.default_rng(2)
        theta = rng.normal(0, 0.2, model.n_params)
        x = pm_inputs(4, 5, seed=3)
        f, jac = model.jacobian(theta, x)
        np.testing.assert_allclose(f, model.predict(theta, x))
        h = 1e-6
        for a in range(model.n_params):
            e = np.zeros(model.n_params)
            e[a] = h
            fd = (model.predict(theta + e, x) - model.predict(theta - e, x)) / (2 * h)
            np.testing.assert_allclose(jac[:, a], fd, atol=1e-7)


class TestOracle:
    def test_rules(self):
        g, mean = np.array([1.0, 0.0]), np.zeros(2)
        out, hit = adversarial_oracle(g, mean, 0.5)
        assert hit and out is mean
        out, hit = adversarial_oracle(g, mean, OracleConfig(1.0))
        assert not hit and out is g
        out, hit = adversarial_oracle(g, mean, 2.0)
        assert not hit

    def test_rejects_epsilon(self):
        with pytest.raises(ValueError):
            OracleConfig(-1.0)
        with pytest.raises(ValueError):
            OracleConfig(float("inf"))

    def test_zero_epsilon_always_means(self):
        g = np.array([1e-9])
        assert adversarial_oracle(g, np.zeros(1), 0.0)[1]


class TestMeanParity:
    def test_all_plus(self):
        fam = enumerate_family(10, 4)
        assert mean_parity_at_point(np.ones(10), fam) == 1.0

    def test_balanced_point(self):
        fam = enumerate_family(12, 6)
        x = np.array([1.0] * 6 + [-1.0] * 6)
        assert abs(mean_parity_at_point(x, fam)) <= 0.05

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 9).flatmap(lambda d: st.tuples(st.just(d), st.integers(1, d),
                                                         st.lists(st.sampled_from([-1, 1]), min_size=d, max_size=d))))
    def test_formula_matches_products(self, args):
        d, k, x = args
        fam = enumerate_family(d, k)
        a = mean_parity_at_point(x, fam)
        assert a == pytest.approx(mean_parity_by_products(x, fam), abs=1e-12)
        # flipping every sign multiplies each parity by (-1)^k
        assert mean_parity_at_point([-v for v in x], fam) == pytest.approx((-1) ** k * a, abs=1e-12)

    def test_rejects(self):
        fam = enumerate_family(4, 2)
        with pytest.raises(ValueError):
            mean_parity_at_point([1, 0, 1, 1], fam)
        with pytest.raises(ValueError):
            mean_parity_by_products(np.ones(20), enumerate_family(20, 10, cap=10, monte_carlo=True))


class TestDemo:
    def test_small_run(self):
        fam = enumerate_family(8, 4)
        rep = hardness_demo(fam, trials=2, queries=5, n=512, n_test=512, seed=3)
        assert len(rep.trials) == 2 and rep.queries == 5
        assert rep.epsilon == pytest.approx(rep.variance ** (1 / 3))
        assert set(rep.summary()) == {"meanLoss", "variance", "bound", "epsilon"}
        assert rep.variance <= rep.bound

    def test_zero_epsilon_forces_mean(self):
        rep = hardness_demo(enumerate_family(6, 3), trials=1, queries=3, n=256, n_test=256, epsilon=0.0)
        assert rep.trials[0].oracle_interventions == 3

    def test_rejects(self):
        with pytest.raises(ValueError):
            hardness_demo(enumerate_family(6, 3), trials=0)
