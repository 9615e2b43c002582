#!/usr/bin/env python3
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import Field
from scipy.stats import norm

from components.bias import (
    DEFAULT_BIN_WIDTH,
    RecommendationProfile,
    recommendation_log_bias,
    theta_histogram,
)
from components.config import StrictModel
from components.dataset import ItemCatalog
from components.errors import ConfigError, FingerprintMismatch, InputError, UndefinedStatistic

PERCENT_DECIMALS = 2


class EvalConfig(StrictModel):
    n: int = Field(10, ge=1)
    relevance_threshold: float | None = Field(None, gt=0)
    graded_gains: bool = False
    bin_width: float = Field(DEFAULT_BIN_WIDTH, gt=0)
    bias_scope: Literal["top-n", "all-pairs"] = "all-pairs"

    def threshold(self, scale_max: float) -> float:
        """Explicit threshold, or ceil(0.8 * R) (4 on a 1-5 scale)."""
        if self.relevance_threshold is not None:
            return self.relevance_threshold
        return float(math.ceil(0.8 * scale_max - 1e-9))


def _aligned(predictions, truths, scale_max):
    predicted = np.asarray(list(predictions), dtype=float)
    actual = np.asarray(list(truths), dtype=float)
    if predicted.shape != actual.shape:
        raise InputError("Got [%s] predictions for [%s] truths" % (predicted.size, actual.size))
    if predicted.size == 0:
        raise UndefinedStatistic("Error metrics need at least one (prediction, truth) pair")
    if scale_max is not None:
        predicted = np.clip(predicted, 1.0, scale_max)
    return predicted, actual


def rmse(predictions: Sequence[float], truths: Sequence[float], scale_max: float | None = None) -> float:
    """Root mean squared error; predictions are clamped to [1, scale_max] when it is given."""
    predicted, actual = _aligned(predictions, truths, scale_max)
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def mae(predictions: Sequence[float], truths: Sequence[float], scale_max: float | None = None) -> float:
    predicted, actual = _aligned(predictions, truths, scale_max)
    return float(np.mean(np.abs(predicted - actual)))


def relevant_items(ratings: Mapping[str, float], threshold: float) -> dict[str, float]:
    return {i: r for i, r in ratings.items() if r >= threshold}


def _ranked(profile) -> list[str]:
    return list(getattr(profile, "items", profile))


def ndcg_at_n(profile, relevant, n: int, graded: bool = False) -> float | None:
    """NDCG@n with 1/log2(rank + 1) discounts. None when nothing is relevant.

    Gains are 1 per relevant item, or the item's rating when ``graded`` (then
    ``relevant`` must map item -> rating).
    """
    if n < 1:
        raise ConfigError("List length must be at least 1, got [%s]" % n)
    if not relevant:
        return None
    gains = dict(relevant) if graded else {i: 1.0 for i in relevant}
    dcg = sum(gains[i] / math.log2(rank + 1)
              for rank, i in enumerate(_ranked(profile)[:n], start=1) if i in gains)
    ideal = sorted(gains.values(), reverse=True)[:n]
    idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal, start=1))
    return dcg / idcg


def mrr(profile, relevant) -> float | None:
    """Reciprocal rank of the first relevant item, 0 when none is listed; None when nothing is relevant."""
    if not relevant:
        return None
    for rank, item_id in enumerate(_ranked(profile), start=1):
        if item_id in relevant:
            return 1.0 / rank
    return 0.0


@dataclass(frozen=True, eq=False)
class BiasAggregate:
    mean: float
    std: float | None
    count: int
    histogram: pd.DataFrame


def aggregate_scores(scores, bin_width=DEFAULT_BIN_WIDTH) -> BiasAggregate:
    """Mean and sample std of the defined log-bias values; std is None for a single user."""
    if isinstance(scores, Mapping):
        scores = scores.values()
    ordered = sorted((s for s in scores if s.defined), key=lambda s: str(s.user_id))
    if not ordered:
        raise UndefinedStatistic("Log-bias is undefined for every profile")
    values = np.array([s.theta for s in ordered])
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return BiasAggregate(float(values.mean()), std, len(values), theta_histogram(values, bin_width))


def aggregate_bias(profiles: Sequence[RecommendationProfile], catalog: ItemCatalog,
                   bin_width=DEFAULT_BIN_WIDTH) -> BiasAggregate:
    return aggregate_scores([recommendation_log_bias(p, catalog) for p in profiles], bin_width)


@dataclass(frozen=True)
class SignificanceResult:
    x_bar: float
    mu: float
    sigma: float
    n: int
    z: float
    p: float


def z_test_left(x_bar: float, mu: float, sigma: float, n: int) -> SignificanceResult:
    """z = (x_bar - mu) / (sigma / sqrt(n)), p = Phi(z)."""
    if n < 2:
        raise UndefinedStatistic("z-test needs n >= 2, got [%s]" % n)
    if not sigma > 0:
        raise UndefinedStatistic("z-test needs a positive sigma, got [%s]" % sigma)
    z = (x_bar - mu) / (sigma / math.sqrt(n))
    return SignificanceResult(x_bar, mu, sigma, n, z, float(norm.cdf(z)))


def paired_z_test_left(treatment: Mapping[str, float], control: Mapping[str, float]) -> SignificanceResult:
    """Left-tail z-test on per-user differences treatment - control over the users both define.

    ``sigma`` is the std of the differences; ``x_bar`` and ``mu`` are the two means.
    """
    users = sorted(set(treatment) & set(control))
    if len(users) < 2:
        raise UndefinedStatistic("Paired z-test needs at least 2 shared users, got [%s]" % len(users))
    t = np.array([treatment[u] for u in users], dtype=float)
    c = np.array([control[u] for u in users], dtype=float)
    diff = t - c
    sigma = float(np.std(diff, ddof=1))
    if not sigma > 0:
        raise UndefinedStatistic("Paired differences have zero variance")
    z = float(diff.mean()) / (sigma / math.sqrt(len(users)))
    return SignificanceResult(float(t.mean()), float(c.mean()), sigma, len(users), z, float(norm.cdf(z)))


@dataclass(frozen=True)
class PairedOutcome:
    """A paired comparison that either produced a test or says why it could not."""

    result: SignificanceResult | None
    shared_users: int
    reason: str = ""

    @property
    def defined(self) -> bool:
        return self.result is not None

    @property
    def status(self) -> str:
        return "ok" if self.defined else "undefined: %s" % self.reason


def compare_bias(treatment: Mapping[str, float] | None, control: Mapping[str, float] | None) -> PairedOutcome:
    """Paired left-tail test of treatment < control; never raises for missing or degenerate data."""
    treatment, control = treatment or {}, control or {}
    shared = len(set(treatment) & set(control))
    try:
        return PairedOutcome(paired_z_test_left(treatment, control), shared)
    except UndefinedStatistic as e:
        return PairedOutcome(None, shared, str(e))


class MetricsReport(StrictModel):
    config_fingerprint: str
    algorithm: str = ""
    mode: str = ""
    mean_log_bias: float | None = None
    bias_std: float | None = None
    bias_count: int = 0
    rmse: float
    mae: float
    ndcg: float | None = None
    mrr: float | None = None
    n_users: int = Field(gt=0)
    n_predictions: int = 0
    truncated_lists: int = 0
    skipped_nonpositive: int = 0
    notes: tuple[str, ...] = ()


def bias_reduction_pct(before: float | None, after: float | None) -> float | None:
    if before is None or after is None or before == 0:
        return None
    return (before - after) / before * 100.0


def loss_pct(before: float | None, after: float | None) -> float | None:
    if before is None or after is None or before == 0:
        return None
    return (after - before) / before * 100.0


def relevance_loss_pct(before: float | None, after: float | None) -> float | None:
    """Loss for higher-is-better scores: the percent drop."""
    return bias_reduction_pct(before, after)


@dataclass(frozen=True)
class ExperimentComparison:
    bias_reduction_pct: float | None
    rmse_loss_pct: float | None
    mae_loss_pct: float | None
    ndcg_loss_pct: float | None
    mrr_loss_pct: float | None

    def rounded(self) -> dict[str, float | None]:
        return {k: None if v is None else round(v, PERCENT_DECIMALS) for k, v in asdict(self).items()}


def compare(before: MetricsReport, after: MetricsReport) -> ExperimentComparison:
    """Percent bias reduction and accuracy/relevance losses going from ``before`` to ``after``.

    NDCG and MRR losses are reported as drops, so a lower score is a positive loss.
    """
    if before.config_fingerprint != after.config_fingerprint:
        raise FingerprintMismatch("Cannot compare reports from [%s] and [%s]"
                                  % (before.config_fingerprint, after.config_fingerprint))
    return ExperimentComparison(
        bias_reduction_pct=bias_reduction_pct(before.mean_log_bias, after.mean_log_bias),
        rmse_loss_pct=loss_pct(before.rmse, after.rmse),
        mae_loss_pct=loss_pct(before.mae, after.mae),
        ndcg_loss_pct=relevance_loss_pct(before.ndcg, after.ndcg),
        mrr_loss_pct=relevance_loss_pct(before.mrr, after.mrr),
    )
