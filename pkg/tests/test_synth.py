import math

import numpy as np
import pytest
from pydantic import ValidationError

from components.bias import debias_ratings, estimate_user_bias, global_bias
from components.synth import (
    DistributionSpec,
    GenerativeConfig,
    NoiseSpec,
    UserTruth,
    generate_dataset,
    generate_rating,
    rating_value,
    save_synthetic,
)

POINT_02 = DistributionSpec(family="point", value=0.2)


class TestDistributions:
    def test_point_mass(self):
        rng = np.random.default_rng(0)
        assert POINT_02.sample(rng) == 0.2
        assert POINT_02.expected() == 0.2

    def test_uniform_mean_within_tolerance(self):
        spec = DistributionSpec(family="uniform", lo=0.3, hi=0.9)
        draws = spec.sample(np.random.default_rng(1), 20000)
        se = draws.std() / math.sqrt(len(draws))
        assert abs(draws.mean() - spec.expected()) < 4 * se

    def test_truncated_normal_is_non_negative(self):
        spec = DistributionSpec(family="normal", mean=0.05, sd=0.1)
        draws = spec.sample(np.random.default_rng(2), 5000)
        assert draws.min() >= 0
        assert spec.expected() > 0.05

    def test_missing_parameters(self):
        with pytest.raises(ValidationError):
            DistributionSpec(family="uniform", lo=0.5)
        with pytest.raises(ValidationError):
            DistributionSpec(family="point", value=-1)

    @pytest.mark.parametrize("family", ["uniform", "normal"])
    def test_noise_is_symmetric_around_center(self, family):
        draws = NoiseSpec(family=family, width=0.3).sample(0.2, np.random.default_rng(3), 50000)
        assert draws.min() >= 0
        assert abs(draws.mean() - 0.2) < 4 * draws.std() / math.sqrt(len(draws))


class TestRatingModel:
    def test_exact_reconstruction(self):
        assert rating_value(0.5, 0.2, True, 10) == pytest.approx(10 * math.exp(-0.7))
        assert rating_value(0.5, 0.2, False, 10) == pytest.approx(10 * math.exp(-0.5))

    def test_clamp(self):
        assert rating_value(5.0, 0.0, False, 10, clamp=True) == 1.0

    def test_generate_rating_without_noise(self):
        config = GenerativeConfig(p_noise=NoiseSpec(family="point"), q_noise=NoiseSpec(family="point"))
        r, p, q = generate_rating(UserTruth("u", 0.4, 0.3), True, config, np.random.default_rng(0))
        assert (p, q) == (0.4, 0.3)
        assert r == pytest.approx(10 * math.exp(-0.7))

    def test_realized_values_reproduce_ratings(self):
        sd = generate_dataset(GenerativeConfig(n_users=20, n_items=30, density=0.5, seed=5))
        merged = sd.ratings.frame.merge(sd.realized, on=["user_id", "item_id"])
        disadvantaged = sd.catalog.disadvantaged_mask(merged["item_id"].to_numpy())
        expected = rating_value(merged["p"], merged["q"], disadvantaged, 10)
        assert np.allclose(merged["rating"], expected, rtol=0, atol=1e-12)
        assert (merged.loc[~disadvantaged, "q"] == 0).all()


class TestGenerateDataset:
    def test_full_density_rates_every_pair(self):
        sd = generate_dataset(GenerativeConfig(n_users=2, n_items=2, density=1.0))
        assert sd.ratings.n_ratings == 4
        assert sd.ratings.frame["item_id"].tolist() == ["i0001", "i0002", "i0001", "i0002"]

    def test_no_disadvantaged_items_means_undefined_bias(self):
        sd = generate_dataset(GenerativeConfig(n_users=10, n_items=20, disadvantaged_fraction=0.0))
        scores = estimate_user_bias(sd.ratings)
        assert not any(s.defined for s in scores.values())
        assert global_bias(scores).gamma_hat is None

    def test_same_seed_same_data(self, tmp_path):
        config = GenerativeConfig(n_users=15, n_items=25, density=0.4, seed=9)
        a = save_synthetic(generate_dataset(config), tmp_path / "a")
        b = save_synthetic(generate_dataset(config), tmp_path / "b")
        for key in a:
            assert a[key].read_bytes() == b[key].read_bytes()

    def test_users_independent_of_population_size(self):
        small = generate_dataset(GenerativeConfig(n_users=5, n_items=10, seed=4))
        large = generate_dataset(GenerativeConfig(n_users=8, n_items=10, seed=4))
        assert small.truth.equals(large.truth.iloc[:5].reset_index(drop=True))

    def test_estimated_log_bias_is_unbiased(self):
        sd = generate_dataset(GenerativeConfig(n_users=1000, n_items=200, omega=POINT_02, seed=21))
        scores = estimate_user_bias(sd.ratings)
        betas = sd.beta_map()
        errors = np.array([scores[u].theta - betas[u] for u in sorted(scores) if scores[u].defined])
        assert len(errors) == 1000
        assert abs(errors.mean()) < 4 * errors.std() / math.sqrt(len(errors))
        assert global_bias(scores).gamma_hat == pytest.approx(0.2, abs=0.01)

    def test_debiased_disadvantaged_log_mean_recovers_true_preference(self):
        config = GenerativeConfig(n_users=1, n_items=200000, disadvantaged_fraction=0.5,
                                  alpha=DistributionSpec(family="point", value=0.5), seed=2)
        sd = generate_dataset(config)
        debiased = debias_ratings(sd.ratings, estimate_user_bias(sd.ratings))
        mask = debiased.ratings.disadvantaged_mask()
        logs = np.log(debiased.frame["rating"].to_numpy())
        advantaged_logs = np.log(sd.ratings.frame["rating"].to_numpy()[~mask])
        se = advantaged_logs.std() / math.sqrt(len(advantaged_logs))
        assert abs(logs[mask].mean() - (math.log(10) - 0.5)) < 4 * se
