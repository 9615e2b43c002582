import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from components.bias import (
    GroupMeans,
    RecommendationProfile,
    UserBiasScore,
    bias_frame,
    debias_ratings,
    estimate_user_bias,
    global_bias,
    group_geometric_means,
    preference_correct,
    recommendation_log_bias,
    save_bias_report,
    theta_histogram,
    user_log_bias,
)
from components.dataset import GroupLabel, ItemCatalog, user_profile
from components.errors import ConfigError, InputError, MissingThetaError

CATALOG = ItemCatalog({"a1": GroupLabel.ADVANTAGED, "a2": GroupLabel.ADVANTAGED,
                       "d1": GroupLabel.DISADVANTAGED, "d2": GroupLabel.DISADVANTAGED})
LABELS = {"a1": "A", "a2": "A", "d1": "D", "d2": "D"}


class TestGroupMeans:
    def test_worked_example(self):
        means = group_geometric_means({"a1": 8, "a2": 2, "d1": 2, "d2": 2}, CATALOG)
        assert means.r_ua == pytest.approx(4.0)
        assert means.r_ud == pytest.approx(2.0)
        assert (means.n, means.m) == (2, 2)

    def test_singletons(self):
        means = group_geometric_means({"a1": 5, "d1": 5}, CATALOG)
        assert means.r_ua == pytest.approx(5.0) and means.r_ud == pytest.approx(5.0)

    def test_missing_group_is_absent(self):
        means = group_geometric_means({"a1": 3, "a2": 4}, CATALOG)
        assert means.r_ud is None and means.m == 0

    def test_log_domain_matches_naive_product(self):
        values = {"a1": 3.0, "a2": 7.0, "d1": 1.5, "d2": 9.25}
        means = group_geometric_means(values, CATALOG)
        assert abs(means.r_ua - (3.0 * 7.0) ** 0.5) < 1e-12
        assert abs(means.r_ud - (1.5 * 9.25) ** 0.5) < 1e-12

    def test_rejects_non_positive(self):
        with pytest.raises(InputError):
            group_geometric_means({"a1": 0.0, "d1": 2.0}, CATALOG)


class TestUserLogBias:
    def test_ratio(self):
        score = user_log_bias(GroupMeans(4.0, 2.0, 2, 2))
        assert score.defined
        assert score.theta == pytest.approx(math.log(2))

    def test_equal_means(self):
        assert user_log_bias(GroupMeans(3.0, 3.0, 1, 1)).theta == 0.0

    def test_undefined_when_group_empty(self):
        score = user_log_bias(GroupMeans(3.0, None, 2, 0), user_id="u")
        assert not score.defined and score.theta == 0.0 and score.user_id == "u"

    def test_raising_disadvantaged_ratings_never_increases_theta(self):
        base = {"a1": 4.0, "a2": 3.0, "d1": 2.0, "d2": 2.5}
        before = user_log_bias(group_geometric_means(base, CATALOG)).theta
        raised = dict(base, d1=3.5)
        assert user_log_bias(group_geometric_means(raised, CATALOG)).theta <= before


class TestEstimateUserBias:
    def test_matches_per_user_computation(self, make_dataset):
        rng = np.random.default_rng(11)
        rows = [("u%d" % u, i, float(rng.integers(1, 6))) for u in range(30) for i in LABELS if rng.random() < 0.8]
        ds = make_dataset(rows, LABELS)
        scores = estimate_user_bias(ds)
        for user_id in ds.users:
            expected = user_log_bias(group_geometric_means(user_profile(ds, user_id), CATALOG), user_id)
            assert scores[user_id].defined == expected.defined
            assert abs(scores[user_id].theta - expected.theta) < 1e-12

    def test_scale_bound(self, make_dataset):
        rows = [("u1", "a1", 5), ("u1", "d1", 1), ("u2", "a1", 1), ("u2", "d2", 5)]
        scores = estimate_user_bias(make_dataset(rows, LABELS))
        assert scores["u1"].theta == pytest.approx(math.log(5))
        assert scores["u2"].theta == pytest.approx(-math.log(5))
        assert all(abs(s.theta) <= math.log(5) + 1e-12 for s in scores.values())


class TestDebiasAndCorrect:
    def test_debias_scales_disadvantaged_only(self, make_dataset):
        ds = make_dataset([("u1", "a1", 3), ("u1", "d1", 3)], LABELS)
        out = debias_ratings(ds, {"u1": math.log(2)})
        ratings = dict(zip(out.frame["item_id"], out.frame["rating"]))
        assert ratings["a1"] == pytest.approx(3.0)
        assert ratings["d1"] == pytest.approx(6.0)

    def test_debias_is_not_clamped(self, make_dataset):
        ds = make_dataset([("u1", "d1", 5)], LABELS)
        out = debias_ratings(ds, {"u1": 1.0})
        assert out.frame["rating"].iloc[0] == pytest.approx(5 * math.e)

    def test_zero_theta_is_identity(self, make_dataset):
        ds = make_dataset([("u1", "a1", 2), ("u1", "d1", 4), ("u2", "d2", 1)], LABELS)
        out = debias_ratings(ds, {"u1": 0.0, "u2": 0.0})
        assert_allclose(out.frame["rating"], ds.frame["rating"])

    def test_debias_accepts_scores(self, make_dataset):
        ds = make_dataset([("u1", "a1", 4), ("u1", "d1", 2)], LABELS)
        out = debias_ratings(ds, estimate_user_bias(ds))
        assert_allclose(sorted(out.frame["rating"]), [4.0, 4.0])

    def test_missing_theta(self, make_dataset):
        ds = make_dataset([("u1", "a1", 3), ("u2", "d1", 3)], LABELS)
        with pytest.raises(MissingThetaError):
            debias_ratings(ds, {"u1": 0.1})
        with pytest.raises(MissingThetaError):
            preference_correct({("u2", "d1"): 3.0}, {"u1": 0.1}, CATALOG)

    def test_correct_example(self):
        out = preference_correct({("u", "d1"): 6.0, ("u", "a1"): 6.0}, {"u": math.log(2)}, CATALOG)
        assert out[("u", "d1")] == pytest.approx(3.0)
        assert out[("u", "a1")] == 6.0

    def test_debias_then_correct_is_identity(self, make_dataset):
        ds = make_dataset([("u1", "d1", 3.7), ("u1", "a1", 2.2), ("u2", "d2", 1.3)], LABELS)
        thetas = {"u1": 0.37, "u2": -0.81}
        out = debias_ratings(ds, thetas)
        predictions = {(u, i): r for u, i, r in out.frame[["user_id", "item_id", "rating"]].itertuples(index=False)}
        corrected = preference_correct(predictions, thetas, CATALOG)
        original = {(u, i): r for u, i, r in ds.frame[["user_id", "item_id", "rating"]].itertuples(index=False)}
        for key, value in corrected.items():
            assert abs(value - original[key]) < 1e-12


class TestRecommendationBias:
    def test_equal_predictions(self):
        profile = RecommendationProfile("u", ("a1", "d1"), {"a1": 4.0, "d1": 4.0})
        assert recommendation_log_bias(profile, CATALOG).theta == 0.0

    def test_worked_example(self):
        profile = RecommendationProfile("u", ("a1", "a2", "d1", "d2"),
                                        {"a1": 4.0, "a2": 9.0, "d1": 2.0, "d2": 4.5})
        assert recommendation_log_bias(profile, CATALOG).theta == pytest.approx(math.log(2))

    def test_single_group_is_undefined(self):
        profile = RecommendationProfile("u", ("a1",), {"a1": 4.0})
        assert not recommendation_log_bias(profile, CATALOG).defined


class TestGlobalBias:
    def test_mean_of_defined(self):
        scores = [UserBiasScore("u%d" % k, t, True, 1, 1) for k, t in enumerate([0.1, 0.2, 0.3])]
        scores.append(UserBiasScore("zz", 0.0, False, 0, 3))
        result = global_bias(scores)
        assert result.gamma_hat == pytest.approx(0.2)
        assert result.count == 3

    def test_all_undefined(self):
        result = global_bias({"u": UserBiasScore("u", 0.0, False, 0, 2)})
        assert result.gamma_hat is None and result.count == 0


class TestHistogram:
    def test_bins_cover_range(self):
        frame = theta_histogram([0.0, 0.01, 0.05, 0.16], bin_width=0.05)
        assert frame["bin_lo"].tolist() == [0.0, 0.05, 0.1, 0.15]
        assert frame["bin_hi"].tolist() == [0.05, 0.1, 0.15, 0.2]
        assert frame["count"].tolist() == [2, 1, 0, 1]

    def test_negative_values(self):
        frame = theta_histogram([-0.12, 0.02], bin_width=0.1)
        assert frame["bin_lo"].tolist() == [-0.2, -0.1, 0.0]
        assert frame["count"].sum() == 2

    def test_empty_and_bad_width(self):
        assert theta_histogram([]).empty
        with pytest.raises(ConfigError):
            theta_histogram([0.1], bin_width=0)


class TestBiasReport:
    def test_report_rows_in_user_order(self, tmp_path):
        scores = {"u2": UserBiasScore("u2", 0.5, True, 1, 2), "u1": UserBiasScore("u1", 0.0, False, 0, 3)}
        assert bias_frame(scores)["user_id"].tolist() == ["u1", "u2"]
        save_bias_report(scores, tmp_path / "bias.csv")
        lines = (tmp_path / "bias.csv").read_text().splitlines()
        assert lines[0] == "user_id,theta,defined,m,n"
        assert lines[1] == "u1,0.0,False,0,3"
