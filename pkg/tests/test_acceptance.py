"""End-to-end acceptance checks, one test class per criterion.

Every check records a PASS/FAIL line; the terminal summary prints one line per criterion.
Run alone with ``pytest tests/test_acceptance.py -v`` (criterion 5 trains twelve models and takes minutes).
"""

import itertools
import math
import sys
import time

import numpy as np
import pytest

from cotlab.checks import DEFAULT_ETA0, calibrate_eta0, gradient_check, theorem3_check, theorem4_check
from cotlab.grads import check_grad_bounds
from cotlab.hardness import (
    DirectModel,
    enumerate_family,
    gram_delta,
    gram_matrix,
    hardness_demo,
    mean_parity_at_point,
    mean_parity_by_products,
    model_variance,
)
from cotlab.link import DEFAULT_LINK, link_constants, phi_eval, phi_prime
from cotlab.model import AttentionWeights
from cotlab.task import (
    STREAM_INPUTS,
    augmented_partial_sum_bound,
    augmented_partial_sum_norm,
    build_instance,
    build_tree,
    enumerate_inputs,
    ground_truth_labels,
    is_trivial,
    kappa,
    make_rng,
    max_nontrivial_contraction,
    sample_augmented,
    sample_inputs,
)
from cotlab.experiments import ExperimentSpec, run_experiment
from cotlab.training import Regime

FIG1_TARGET = [1, 4, 6, 7, 9, 12, 13, 15]


def fig1_tree():
    return build_tree(build_instance(16, 8, target=FIG1_TARGET))


class TestCriterion1Link:
    def test_link_suite(self, criterion):
        start = time.perf_counter()
        f = DEFAULT_LINK
        tol = 1e-12
        ts = np.linspace(-1, 1, 4001)
        checks = {
            "phi(0)=-1": abs(phi_eval(f, 0.0) + 1) <= tol,
            "phi(+-1)=1": abs(phi_eval(f, 1.0) - 1) <= tol and abs(phi_eval(f, -1.0) - 1) <= tol,
            "phi'(0)=phi'(+-1)=0": all(abs(phi_prime(f, t)) <= tol for t in (0.0, 1.0, -1.0)),
            "symmetry": np.max(np.abs(phi_eval(f, ts) - phi_eval(f, -ts))) <= tol,
            "range": phi_eval(f, ts).min() >= -1 - tol and phi_eval(f, ts).max() <= 1 + tol,
            "midpoints": all(abs(phi_eval(f, (a + b) / 2) - a * b) <= tol for a, b in itertools.product((-1.0, 1.0), repeat=2)),
        }
        elapsed = time.perf_counter() - start
        for name, ok in checks.items():
            criterion(1, name, ok)
        criterion(1, "runtime", elapsed < 1.0, f"{elapsed:.3f}s")
        assert all(checks.values()) and elapsed < 1.0


class TestCriterion2Gradients:
    def test_finite_differences(self, criterion):
        start = time.perf_counter()
        results = gradient_check(d=8, k=4, n=256, trials=5, seed=0, h=1e-5)
        elapsed = time.perf_counter() - start
        for r in results:
            criterion(2, r.regime, r.max_rel_error < 1e-5, f"max rel error {r.max_rel_error:.2e}")
        criterion(2, "runtime", elapsed < 30, f"{elapsed:.1f}s")
        assert len(results) == 3 and all(r.ok for r in results) and elapsed < 30


class TestCriterion3OneStep:
    @pytest.mark.parametrize("target", [FIG1_TARGET, None])
    def test_one_step(self, criterion, target):
        start = time.perf_counter()
        tree = build_tree(build_instance(16, 8, target=target, seed=11))
        rep = theorem3_check(tree, eta=16**2.5)
        elapsed = time.perf_counter() - start
        tag = "fig1" if target else "seed11"
        a = all(rep.argmax_at_children)
        ratios = [row.child_grad_mean / row.predicted_leading for row in rep.leading]
        b = all(0.5 <= r <= 2.0 for r in ratios)
        c = rep.min_child_score >= 0.45 and rep.test.max_abs_err <= 0.2
        criterion(3, f"{tag} top-two at children", a)
        criterion(3, f"{tag} leading term", b, f"ratios {min(ratios):.3f}..{max(ratios):.3f}")
        criterion(3, f"{tag} one step", c,
                  f"min child score {rep.min_child_score:.4f}, max test error {rep.test.max_abs_err:.2e}")
        criterion(3, f"{tag} runtime", elapsed < 300, f"{elapsed:.1f}s")
        assert a and b and c and elapsed < 300


class TestCriterion4Staged:
    def test_staged(self, criterion):
        start = time.perf_counter()
        tree = fig1_tree()
        eta0, _ = calibrate_eta0(tree)
        rep = theorem4_check(tree, eta0)
        elapsed = time.perf_counter() - start
        criterion(4, "calibrated eta0 stable", eta0 == DEFAULT_ETA0, f"eta0={eta0}")
        criterion(4, "integer pattern", not rep.violations,
                  f"level constants { {t: float(v) for t, v in rep.level_values.items()} }, violations {len(rep.violations)}")
        criterion(4, "test error", rep.test.max_abs_err <= 0.1, f"{rep.test.max_abs_err:.2e}")
        criterion(4, "fixed after extra update", rep.stable_after)
        criterion(4, "runtime", elapsed < 300, f"{elapsed:.1f}s")
        assert eta0 == DEFAULT_ETA0 and rep.ok and rep.test.max_abs_err <= 0.1 and elapsed < 300


_FIG4: dict = {}


@pytest.fixture(scope="module")
def figure4_runs():
    if not _FIG4:
        start = time.perf_counter()
        for k in (8, 16, 32):
            _FIG4[k] = run_experiment(ExperimentSpec.figure4(d=64, k=k, n=10_000, epochs=350, seed=7))
        _FIG4["elapsed"] = time.perf_counter() - start
    return _FIG4


def _monotone_deactivation(epochs):
    seen_none = False
    prev = -1
    for e in epochs:
        if e is None:
            seen_none = True
            continue
        if seen_none or e < prev:
            return False
        prev = e
    return True


class TestCriterion5Curves:
    @pytest.mark.slow
    @pytest.mark.parametrize("k", [8, 16, 32])
    def test_direct(self, criterion, figure4_runs, k):
        pred = figure4_runs[k][Regime.DIRECT].final.pred_loss
        ok = 0.45 <= pred <= 0.55
        criterion(5, f"direct k={k}", ok, f"pred {pred:.4f} (want [0.45, 0.55])")
        assert ok

    @pytest.mark.slow
    @pytest.mark.parametrize("k", [8, 16, 32])
    def test_teacher_forcing(self, criterion, figure4_runs, k):
        pred = figure4_runs[k][Regime.COT_TF].final.pred_loss
        ok = pred <= 0.05
        criterion(5, f"teacher forcing k={k}", ok, f"pred {pred:.4f} (want <= 0.05)")
        assert ok

    @pytest.mark.slow
    @pytest.mark.parametrize("k", [8, 16, 32])
    def test_self_consistency(self, criterion, figure4_runs, k):
        trace = figure4_runs[k][Regime.COT_SC]
        pred = trace.final.pred_loss
        deact = trace.deactivation_epochs()
        ok = pred <= 0.05 and _monotone_deactivation(deact)
        criterion(5, f"self-consistency k={k}", ok, f"pred {pred:.4f} (want <= 0.05), deactivation {deact}")
        assert ok

    @pytest.mark.slow
    @pytest.mark.parametrize("k,solved", [(8, True), (16, False)])
    def test_plain_cot(self, criterion, figure4_runs, k, solved):
        pred = figure4_runs[k][Regime.COT].final.pred_loss
        ok = pred <= 0.05 if solved else pred >= 0.45
        criterion(5, f"plain CoT k={k}", ok, f"pred {pred:.4f} (want {'<= 0.05' if solved else '>= 0.45'})")
        assert ok

    @pytest.mark.slow
    def test_runtime(self, criterion, figure4_runs):
        elapsed = figure4_runs["elapsed"]
        criterion(5, "runtime", elapsed <= 1800, f"{elapsed:.0f}s")
        assert elapsed <= 1800


class TestCriterion6Hardness:
    def test_hardness(self, criterion):
        start = time.perf_counter()
        d, k, n = 10, 5, 4096
        fam = enumerate_family(d, k)
        inputs = make_rng(0, STREAM_INPUTS).choice([-1.0, 1.0], size=(n, d))
        g = gram_matrix(fam, inputs)
        off = np.abs(g - np.eye(len(fam))).max()
        var = model_variance(DirectModel(d, k), np.zeros(DirectModel(d, k).n_params), fam, inputs)
        rep = hardness_demo(fam, trials=20, queries=100, n=n, seed=0)
        elapsed = time.perf_counter() - start
        checks = [
            criterion(6, "family size", len(fam) == 252 and fam.exhaustive),
            criterion(6, "gram off-diagonals", off <= gram_delta(d, n), f"{off:.4f} <= {gram_delta(d, n):.4f}"),
            criterion(6, "variance bound", var.variance <= var.bound, f"{var.variance:.3e} <= {var.bound:.3e}"),
            criterion(6, "demo variance bound", rep.variance <= rep.bound),
            criterion(6, "demo loss", rep.mean_loss >= 0.8,
                      f"mean L2 {rep.mean_loss:.4f}, eps {rep.epsilon:.4f}"),
            criterion(6, "runtime", elapsed < 600, f"{elapsed:.1f}s"),
        ]
        assert math.isclose(rep.epsilon, rep.variance ** (1 / 3))
        assert all(checks)


class TestCriterion7Bounds:
    def test_gradient_norm_bounds(self, criterion):
        start = time.perf_counter()
        tree = fig1_tree()
        data = ground_truth_labels(tree, sample_inputs(16, 256, 0, width=tree.size))
        rng = np.random.default_rng(2024)
        worst = {"teacher_forcing": 0.0, "end_to_end": 0.0}
        bounds = {}
        ok = True
        for i in range(100):
            scale = (0.1, 1.0, 3.0, 10.0)[i % 4]
            for regime, kind in (("teacher_forcing", "causal"), ("end_to_end", "block")):
                base = AttentionWeights.zeros(tree, kind)
                w = base.with_w(rng.normal(0, scale, base.w.shape))
                rep = check_grad_bounds(w, data, tree, DEFAULT_LINK, regime)
                worst[regime] = max(worst[regime], rep.max_norm)
                bounds[regime] = rep.bound
                ok &= rep.ok
        elapsed = time.perf_counter() - start
        for regime in worst:
            criterion(7, f"{regime} norm bound", worst[regime] <= bounds[regime],
                      f"max {worst[regime]:.3f} <= {bounds[regime]:.3f}")
        criterion(7, "gradient bounds runtime", elapsed < 300, f"{elapsed:.1f}s")
        assert ok and elapsed < 300

    def test_contraction_bound(self, criterion):
        tree = build_tree(build_instance(8, 4, seed=0))
        data = ground_truth_labels(tree, sample_inputs(8, 4096, 0, width=tree.size))
        value, bound = max_nontrivial_contraction(tree, data, 4), kappa(4096, 0.01, 8)
        assert criterion(7, "contraction kappa", value <= bound, f"{value:.4f} <= {bound:.4f}")

    def test_partial_sum_bound(self, criterion):
        tree = build_tree(build_instance(64, 32, seed=1))
        aug = sample_augmented(64, 2000, 1, width=tree.size)
        # failure budget 1e-6 split evenly over the v + 1 levels
        value = augmented_partial_sum_norm(tree, aug)
        bound = augmented_partial_sum_bound(64, 2000, 1e-6 / (tree.v + 1))
        assert criterion(7, "augmented partial sums", value <= bound, f"{value:.4f} <= {bound:.4f}")

    def test_link_constant(self, criterion):
        c, sup, g = link_constants(DEFAULT_LINK)
        assert criterion(7, "growth exponent", g == math.log2(sup) + 0.5 == 2.5)


class TestCriterion8Oracles:
    @pytest.mark.parametrize("d,k", [(2, 2), (4, 4), (8, 4), (10, 8)])
    def test_is_trivial(self, criterion, d, k):
        tree = build_tree(build_instance(d, k, seed=d))
        cols = ground_truth_labels(tree, enumerate_inputs(d, width=tree.size)).tokens
        mismatches = 0
        count = 0
        for r in range(1, 5):
            for tup in itertools.combinations_with_replacement(range(1, tree.size + 1), r):
                exhaustive = bool(np.all(np.prod(cols[:, [j - 1 for j in tup]], axis=1) == 1))
                mismatches += is_trivial(tup, tree) != exhaustive
                count += 1
        assert criterion(8, f"is_trivial d={d} k={k}", mismatches == 0, f"{count} tuples, {mismatches} mismatches")

    def test_mean_parity(self, criterion):
        mismatches = 0
        count = 0
        for d in range(1, 11):
            points = enumerate_inputs(d).tokens
            for k in range(1, d + 1):
                fam = enumerate_family(d, k)
                for x in points:
                    mismatches += mean_parity_at_point(x, fam) != mean_parity_by_products(x, fam)
                    count += 1
        assert criterion(8, "mean parity", mismatches == 0, f"{count} evaluations, {mismatches} mismatches")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
