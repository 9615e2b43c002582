import math

import numpy as np
import pytest

from components.bias import RecommendationProfile, UserBiasScore
from components.dataset import GroupLabel, ItemCatalog
from components.errors import FingerprintMismatch, InputError, UndefinedStatistic
from components.evaluation import (
    EvalConfig,
    MetricsReport,
    aggregate_bias,
    aggregate_scores,
    compare,
    compare_bias,
    mae,
    mrr,
    ndcg_at_n,
    paired_z_test_left,
    relevant_items,
    rmse,
    z_test_left,
)

# (baseline, with preference correction) pairs per dataset and algorithm:
# (mean log-bias, RMSE)
PUBLISHED = {
    ("AZ", "user-knn"): ((0.137, 0.808), (0.079, 0.871)),
    ("AZ", "item-knn"): ((0.129, 0.736), (0.080, 0.824)),
    ("AZ", "als"): ((0.164, 0.873), (0.121, 0.982)),
    ("AZ", "svd"): ((0.175, 0.790), (0.103, 0.872)),
    ("BX", "user-knn"): ((0.122, 1.580), (0.076, 1.799)),
    ("BX", "item-knn"): ((0.106, 1.511), (0.073, 1.785)),
    ("BX", "als"): ((0.158, 1.815), (0.119, 2.022)),
    ("BX", "svd"): ((0.169, 1.761), (0.114, 1.988)),
}
REPORTED = {
    ("AZ", "user-knn"): (42.39, 7.80), ("AZ", "item-knn"): (37.65, 11.96),
    ("AZ", "als"): (26.51, 12.49), ("AZ", "svd"): (41.43, 10.38),
    ("BX", "user-knn"): (37.82, 13.86), ("BX", "item-knn"): (30.73, 18.13),
    ("BX", "als"): (24.99, 11.41), ("BX", "svd"): (32.34, 12.89),
}
# 0.207 / 1.815 rounds to 11.40, one hundredth below the quoted figure
RMSE_SLACK = {("BX", "als"): 0.01}


def _report(bias, error, **extra):
    values = dict(config_fingerprint="f", mean_log_bias=bias, rmse=error, mae=error, n_users=10)
    values.update(extra)
    return MetricsReport(**values)


class TestErrorMetrics:
    def test_worked_example(self):
        assert rmse([3, 5], [1, 5]) == pytest.approx(math.sqrt(2), abs=1e-12)
        assert mae([3, 5], [1, 5]) == pytest.approx(1.0, abs=1e-12)

    def test_clamped_to_scale(self):
        assert rmse([7.0, 0.2], [5.0, 1.0], scale_max=5) == 0.0

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(0)
        predicted, actual = rng.uniform(1, 5, 50), rng.uniform(1, 5, 50)
        assert rmse(predicted, actual) >= mae(predicted, actual)

    def test_empty_and_mismatched(self):
        with pytest.raises(UndefinedStatistic):
            rmse([], [])
        with pytest.raises(InputError):
            mae([1.0], [1.0, 2.0])


class TestRanking:
    def test_ndcg_worked_example(self):
        value = ndcg_at_n(["a", "x", "b"], {"a", "b"}, 3)
        assert value == pytest.approx(1.5 / (1 + 1 / math.log2(3)), abs=1e-9)
        assert value == pytest.approx(0.9197, abs=1e-4)

    def test_ndcg_ideal_and_empty(self):
        assert ndcg_at_n(["a", "b"], {"a", "b"}, 10) == pytest.approx(1.0)
        assert ndcg_at_n(["a"], set(), 10) is None
        assert ndcg_at_n(["x", "y"], {"a"}, 10) == 0.0

    def test_graded_gains(self):
        profile = RecommendationProfile("u", ("b", "a"), {"a": 4.0, "b": 4.0})
        value = ndcg_at_n(profile, {"a": 5.0, "b": 4.0}, 2, graded=True)
        assert value == pytest.approx((4 + 5 / math.log2(3)) / (5 + 4 / math.log2(3)))

    def test_mrr(self):
        assert mrr(["x", "a"], {"a"}) == 0.5
        assert mrr(["x"], {"a"}) == 0.0
        assert mrr(["x"], {}) is None

    def test_relevance_threshold(self):
        assert EvalConfig().threshold(5) == 4.0
        assert EvalConfig().threshold(10) == 8.0
        assert EvalConfig(relevance_threshold=3).threshold(5) == 3
        assert relevant_items({"a": 4.0, "b": 3.5, "c": 5.0}, 4.0) == {"a": 4.0, "c": 5.0}


class TestBiasAggregate:
    def test_mean_and_std(self):
        scores = [UserBiasScore("u1", 0.1, True, 1, 1), UserBiasScore("u2", 0.3, True, 1, 1),
                  UserBiasScore("u3", 0.0, False, 0, 1)]
        agg = aggregate_scores(scores)
        assert agg.mean == pytest.approx(0.2)
        assert agg.std == pytest.approx(math.sqrt(0.02))
        assert agg.count == 2
        assert agg.histogram["count"].sum() == 2

    def test_single_user_has_no_std(self):
        agg = aggregate_scores([UserBiasScore("u1", 0.4, True, 1, 1)])
        assert agg.std is None

    def test_all_undefined(self):
        catalog = ItemCatalog({"a": GroupLabel.ADVANTAGED, "d": GroupLabel.DISADVANTAGED})
        with pytest.raises(UndefinedStatistic):
            aggregate_bias([RecommendationProfile("u", ("a",), {"a": 3.0})], catalog)


class TestZTest:
    def test_large_sample_row(self):
        result = z_test_left(0.079, 0.137, 0.307, 8958)
        assert result.z == pytest.approx(-17.88, abs=0.05)
        assert result.p < 1e-5

    def test_small_sample_row(self):
        result = z_test_left(0.076, 0.122, 0.343, 75)
        assert result.z == pytest.approx(-1.164, abs=0.05)
        assert result.p == pytest.approx(0.122, abs=0.005)

    def test_no_deviation(self):
        result = z_test_left(0.3, 0.3, 0.1, 10)
        assert result.z == 0.0 and result.p == pytest.approx(0.5)

    def test_antisymmetric(self):
        low, high = z_test_left(0.1, 0.2, 0.3, 40), z_test_left(0.3, 0.2, 0.3, 40)
        assert low.z == pytest.approx(-high.z)
        assert abs(low.p - (1 - high.p)) < 1e-7

    def test_undefined_inputs(self):
        with pytest.raises(UndefinedStatistic):
            z_test_left(0.1, 0.2, 0.0, 10)
        with pytest.raises(UndefinedStatistic):
            z_test_left(0.1, 0.2, 0.3, 1)

    def test_paired(self):
        treatment = {"u%d" % k: 0.1 + 0.01 * k for k in range(10)}
        control = {"u%d" % k: 0.3 + 0.02 * k for k in range(10)}
        control["extra"] = 9.0
        result = paired_z_test_left(treatment, control)
        assert result.n == 10
        assert result.z < 0 and result.p < 0.01
        with pytest.raises(UndefinedStatistic):
            paired_z_test_left({"u": 1.0}, {"u": 2.0})

    def test_compare_bias_reports_undefined_instead_of_raising(self):
        outcome = compare_bias({"u1": 0.1}, {"u1": 0.3, "u2": 0.2})
        assert not outcome.defined
        assert outcome.shared_users == 1
        assert outcome.status.startswith("undefined: ")
        assert compare_bias(None, {"u1": 0.3}).shared_users == 0

    def test_compare_bias_wraps_the_paired_test(self):
        treatment = {"u%d" % k: 0.01 * k for k in range(6)}
        control = {"u%d" % k: 0.2 + 0.02 * k for k in range(6)}
        outcome = compare_bias(treatment, control)
        assert outcome.status == "ok"
        assert outcome.result == paired_z_test_left(treatment, control)


class TestCompare:
    @pytest.mark.parametrize("key", sorted(PUBLISHED))
    def test_published_percentages(self, key):
        (bias0, rmse0), (bias1, rmse1) = PUBLISHED[key]
        reduction, rmse_loss = REPORTED[key]
        result = compare(_report(bias0, rmse0), _report(bias1, rmse1)).rounded()
        if key in RMSE_SLACK:
            assert abs(result["rmse_loss_pct"] - rmse_loss) <= RMSE_SLACK[key] + 1e-9
        else:
            assert result["rmse_loss_pct"] == rmse_loss
        assert abs(result["bias_reduction_pct"] - reduction) <= 0.5

    def test_identity(self):
        report = _report(0.2, 0.9, ndcg=0.4, mrr=0.5)
        result = compare(report, report)
        assert result.bias_reduction_pct == 0.0
        assert result.rmse_loss_pct == 0.0
        assert result.ndcg_loss_pct == 0.0 and result.mrr_loss_pct == 0.0

    def test_relevance_drop_is_positive_loss(self):
        result = compare(_report(0.2, 0.9, ndcg=0.452), _report(0.1, 0.9, ndcg=0.3982))
        assert result.ndcg_loss_pct == pytest.approx((0.452 - 0.3982) / 0.452 * 100)
        assert result.mrr_loss_pct is None

    def test_fingerprints_must_match(self):
        with pytest.raises(FingerprintMismatch):
            compare(_report(0.1, 1.0), _report(0.1, 1.0, config_fingerprint="g"))
