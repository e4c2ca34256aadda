"""Monte-Carlo vs closed-form error of mean-shrunk estimates, and the optimal
shrink weight."""

import numpy as np
import pytest

from cdunlearn.importance import ImportanceMap
from cdunlearn.shrinkage import (
    BetaRecommendation,
    ShrinkageScenario,
    closed_form_mse,
    optimal_beta,
    recommend_beta,
    simulate_mse,
    sweep_betas,
)


def _scenario(**overrides):
    base = dict(
        p=50,
        true_means=np.zeros(50),
        noise_std=1.0,
        beta=0.5,
        trials=4000,
        seed=0,
    )
    base.update(overrides)
    return ShrinkageScenario(**base)


class TestSimulate:
    def test_beta_zero_adjusted_equals_naive(self):
        result = simulate_mse(_scenario(beta=0.0))
        assert result.mse_adjusted == result.mse_naive
        assert result.se_adjusted == result.se_naive

    def test_naive_total_matches_p_sigma_sq(self):
        for p, sigma in ((50, 1.0), (10, 2.0)):
            result = simulate_mse(
                _scenario(p=p, true_means=np.linspace(-1, 1, p), noise_std=sigma)
            )
            assert abs(result.mse_naive - p * sigma**2) <= 4.0 * result.se_naive

    def test_deterministic_per_seed(self):
        a = simulate_mse(_scenario(seed=5))
        b = simulate_mse(_scenario(seed=5))
        assert a == b
        c = simulate_mse(_scenario(seed=6))
        assert a != c

    def test_invalid_scenarios_rejected(self):
        with pytest.raises(ValueError):
            _scenario(noise_std=0.0)
        with pytest.raises(ValueError):
            _scenario(beta=1.2)
        with pytest.raises(ValueError):
            _scenario(trials=0)
        with pytest.raises(ValueError):
            ShrinkageScenario(p=3, true_means=np.zeros(4), noise_std=1.0, beta=0.1, trials=1)


class TestClosedForm:
    def test_beta_zero_is_naive_total(self):
        assert closed_form_mse(7, np.linspace(0, 2, 7), 1.5, 0.0) == pytest.approx(
            7 * 1.5**2
        )

    def test_hand_arithmetic(self):
        # p=3, sigma^2=1, spread 4, beta=0.5: 0.25 * (4 + 3 + 1) - 3 + 3 = 2
        means = np.array([0.0, 0.0, np.sqrt(2.0) * 2 / np.sqrt(2)])  # spread sum 4 below
        means = np.array([-1.0, 0.0, 1.0]) * np.sqrt(2.0)  # sum((m - mean)^2) = 4
        assert closed_form_mse(3, means, 1.0, 0.5) == pytest.approx(2.0, abs=1e-12)

    def test_matches_independent_target_simulation_across_beta_grid(self):
        p = 30
        means = np.linspace(-0.5, 0.5, p)
        for beta in np.arange(0.0, 1.01, 0.1):
            result = simulate_mse(
                _scenario(
                    p=p,
                    true_means=means,
                    beta=float(beta),
                    trials=20_000,
                    layer_noise="independent",
                )
            )
            expected = closed_form_mse(p, means, 1.0, float(beta))
            tolerance = 4.0 * max(result.se_adjusted, 1e-12)
            assert abs(result.mse_adjusted - expected) <= tolerance

    def test_shared_target_bias_is_exactly_the_covariance_term(self):
        # Shrinking toward the empirical mean of the same noisy values couples
        # the errors; the expected total exceeds the closed form by
        # 2 * beta * (1 - beta) * sigma^2.
        p, sigma = 30, 1.0
        means = np.linspace(-0.5, 0.5, p)
        for beta in (0.2, 0.5, 0.8):
            result = simulate_mse(
                _scenario(p=p, true_means=means, beta=beta, trials=20_000)
            )
            expected = closed_form_mse(p, means, sigma, beta) + 2 * beta * (1 - beta) * sigma**2
            tolerance = 4.0 * max(result.se_adjusted, 1e-12)
            assert abs(result.mse_adjusted - expected) <= tolerance

    def test_minimized_at_optimal_beta(self):
        p = 20
        means = np.linspace(0, 3, p)
        sum_sq_dev = float(np.square(means - means.mean()).sum())
        best = optimal_beta(p, sum_sq_dev, 1.0)
        grid = np.arange(0.0, 1.0001, 0.001)
        values = [closed_form_mse(p, means, 1.0, b) for b in grid]
        assert abs(grid[int(np.argmin(values))] - best) <= 0.01


class TestOptimalBeta:
    def test_hand_value(self):
        assert optimal_beta(3, 4.0, 1.0) == pytest.approx(0.375)

    def test_heterogeneous_limit_is_zero(self):
        assert optimal_beta(3, 1e12, 1.0) == pytest.approx(0.0, abs=1e-9)

    def test_homogeneous_limit(self):
        for p in (3, 10, 50):
            assert optimal_beta(p, 0.0, 2.0) == pytest.approx(p / (p + 1))

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            optimal_beta(3, 1.0, 0.0)
        with pytest.raises(ValueError):
            optimal_beta(3, -1.0, 1.0)


class TestImprovementRange:
    def test_shrinkage_beats_naive_inside_safe_range(self):
        p = 25
        means = np.linspace(-2, 2, p)
        sum_sq_dev = float(np.square(means - means.mean()).sum())
        best = optimal_beta(p, sum_sq_dev, 1.0)
        for beta in (0.25 * best, best, min(1.75 * best, 1.0)):
            result = simulate_mse(
                _scenario(p=p, true_means=means, beta=float(beta), trials=20_000)
            )
            margin = 3.0 * np.hypot(result.se_naive, result.se_adjusted)
            assert result.mse_adjusted < result.mse_naive - margin

    def test_inequality_reverses_far_outside_range(self):
        # heterogeneous layer: the optimal weight is tiny and beta = 0.5 hurts
        p = 10
        means = np.linspace(-10, 10, p)
        sum_sq_dev = float(np.square(means - means.mean()).sum())
        best = optimal_beta(p, sum_sq_dev, 1.0)
        assert 0.5 > 2 * best
        result = simulate_mse(
            _scenario(p=p, true_means=means, beta=0.5, trials=5_000)
        )
        assert result.mse_adjusted > result.mse_naive
        assert closed_form_mse(p, means, 1.0, 0.5) > p * 1.0


class TestRecommendBeta:
    def test_small_layer_rejected(self):
        imp = ImportanceMap({"tiny": np.array([0.1, 0.2])})
        with pytest.raises(ValueError, match=">= 3"):
            recommend_beta(imp, "tiny")

    def test_constant_layer_is_degenerate(self):
        imp = ImportanceMap({"flat": np.full(10, 0.4)})
        rec = recommend_beta(imp, "flat")
        assert rec == BetaRecommendation(beta=1.0, degenerate=True)

    def test_planted_noise_recovers_optimal_weight(self):
        rng = np.random.default_rng(8)
        p, sigma = 500, 0.3
        means = rng.uniform(2.0, 3.0, size=p)  # keep observations positive
        observed = means + rng.standard_normal(p) * sigma
        imp = ImportanceMap({"layer": observed})
        rec = recommend_beta(imp, "layer", sigma_sq=sigma**2)
        truth = optimal_beta(p, float(np.square(means - means.mean()).sum()), sigma**2)
        assert abs(rec.beta - truth) <= 0.25 * truth
        assert not rec.degenerate

    def test_clamped_into_unit_interval(self):
        rng = np.random.default_rng(9)
        imp = ImportanceMap({"layer": rng.standard_normal(20) * 1e-3 + 5.0})
        rec = recommend_beta(imp, "layer", sigma_sq=100.0)
        assert rec.beta == 1.0


def test_sweep_rows_share_common_draws():
    rows = sweep_betas(10, np.zeros(10), 1.0, np.array([0.0, 0.5]), trials=500, seed=3)
    assert rows[0]["mse_naive"] == rows[1]["mse_naive"]
    assert rows[0]["beta"] == 0.0 and rows[1]["beta"] == 0.5
