#!/usr/bin/env python3
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from components.dataset import GroupLabel, ItemCatalog, RatingsDataset
from components.errors import ConfigError, InputError, MissingThetaError

_logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.05
BIAS_COLUMNS = ["user_id", "theta", "defined", "m", "n"]
HISTOGRAM_COLUMNS = ["bin_lo", "bin_hi", "count"]


@dataclass(frozen=True)
class GroupMeans:
    """Geometric means per group; a mean is None when its group is empty.

    ``n`` counts advantaged items and ``m`` disadvantaged ones.
    """

    r_ua: float | None
    r_ud: float | None
    n: int
    m: int
    log_ua: float | None = None
    log_ud: float | None = None


@dataclass(frozen=True)
class UserBiasScore:
    user_id: str | None
    theta: float
    defined: bool
    m: int
    n: int
    r_ua: float | None = None
    r_ud: float | None = None


@dataclass(frozen=True)
class RecommendationProfile:
    user_id: str
    items: tuple[str, ...]
    ratings: Mapping[str, float]
    truncated: bool = False


@dataclass(frozen=True)
class GlobalBias:
    gamma_hat: float | None
    count: int


@dataclass(frozen=True, eq=False)
class DebiasedDataset:
    """Ratings with every disadvantaged entry scaled by e^theta of its user.

    Values may exceed the rating scale; they are never clamped.
    """

    ratings: RatingsDataset
    thetas: Mapping[str, float]

    @property
    def frame(self) -> pd.DataFrame:
        return self.ratings.frame

    @property
    def scale_max(self) -> float:
        return self.ratings.scale_max

    @property
    def catalog(self) -> ItemCatalog:
        return self.ratings.catalog


def _ratings_of(profile) -> Mapping[str, float]:
    return getattr(profile, "ratings", profile)


def group_geometric_means(profile, catalog: ItemCatalog) -> GroupMeans:
    """Per-group geometric means of a profile (UserProfile, RecommendationProfile or item->rating map)."""
    ratings = _ratings_of(profile)
    if not ratings:
        return GroupMeans(None, None, 0, 0)
    items = list(ratings.keys())
    values = np.fromiter((ratings[i] for i in items), dtype=float, count=len(items))
    if (values <= 0).any():
        raise InputError("Geometric means need positive ratings, got [%s]" % values.min())
    disadvantaged = catalog.disadvantaged_mask(items)
    logs = np.log(values)
    n = int((~disadvantaged).sum())
    m = int(disadvantaged.sum())
    log_ua = float(logs[~disadvantaged].mean()) if n else None
    log_ud = float(logs[disadvantaged].mean()) if m else None
    return GroupMeans(r_ua=math.exp(log_ua) if n else None,
                      r_ud=math.exp(log_ud) if m else None,
                      n=n, m=m, log_ua=log_ua, log_ud=log_ud)


def user_log_bias(means: GroupMeans, user_id=None) -> UserBiasScore:
    """theta = ln(r_ua / r_ud); undefined (and 0) when either group is empty."""
    if means.n == 0 or means.m == 0:
        return UserBiasScore(user_id, 0.0, False, means.m, means.n, means.r_ua, means.r_ud)
    log_ua = means.log_ua if means.log_ua is not None else math.log(means.r_ua)
    log_ud = means.log_ud if means.log_ud is not None else math.log(means.r_ud)
    return UserBiasScore(user_id, log_ua - log_ud, True, means.m, means.n, means.r_ua, means.r_ud)


def estimate_user_bias(ds: RatingsDataset) -> dict[str, UserBiasScore]:
    """Log-bias of every user in ``ds``, computed group-wise over the whole frame."""
    frame = ds.frame
    if (frame["rating"].to_numpy() <= 0).any():
        raise InputError("Geometric means need positive ratings")
    work = pd.DataFrame({
        "user_id": frame["user_id"].to_numpy(),
        "disadvantaged": ds.disadvantaged_mask(),
        "log": np.log(frame["rating"].to_numpy()),
    })
    stats = work.groupby(["user_id", "disadvantaged"])["log"].agg(["mean", "size"]).unstack("disadvantaged")

    def column(stat, flag):
        if (stat, flag) in stats.columns:
            return stats[(stat, flag)]
        return pd.Series(np.nan, index=stats.index)

    log_ua, log_ud = column("mean", False), column("mean", True)
    n = column("size", False).fillna(0).astype(int)
    m = column("size", True).fillna(0).astype(int)

    scores = {}
    for user_id in stats.index:
        means = GroupMeans(
            r_ua=math.exp(log_ua[user_id]) if n[user_id] else None,
            r_ud=math.exp(log_ud[user_id]) if m[user_id] else None,
            n=int(n[user_id]), m=int(m[user_id]),
            log_ua=float(log_ua[user_id]) if n[user_id] else None,
            log_ud=float(log_ud[user_id]) if m[user_id] else None)
        scores[user_id] = user_log_bias(means, user_id)
    undefined = sum(1 for s in scores.values() if not s.defined)
    if undefined:
        _logger.info("[%s] of [%s] users rated only one group; their log-bias is undefined",
                     undefined, len(scores))
    return scores


def theta_values(theta_map) -> dict[str, float]:
    return {u: float(getattr(t, "theta", t)) for u, t in theta_map.items()}


def _require_thetas(users, thetas):
    missing = sorted(set(users) - thetas.keys())
    if missing:
        raise MissingThetaError("No log-bias for [%s] users, e.g. [%s]" % (len(missing), missing[0]))


def debias_ratings(ds: RatingsDataset, theta_map) -> DebiasedDataset:
    """d_ui = r_ui * e^theta_u on disadvantaged items; advantaged ratings are copied unchanged."""
    thetas = theta_values(theta_map)
    frame = ds.frame
    _require_thetas(frame["user_id"].unique(), thetas)
    theta = frame["user_id"].map(thetas).to_numpy(dtype=float)
    ratings = frame["rating"].to_numpy()
    debiased = np.where(ds.disadvantaged_mask(), ratings * np.exp(theta), ratings)
    out = RatingsDataset(scale_max=ds.scale_max,
                         frame=frame.assign(rating=debiased),
                         catalog=ds.catalog,
                         check_scale=False)
    return DebiasedDataset(ratings=out, thetas=thetas)


def preference_correct(predictions: Mapping[tuple[str, str], float], theta_map,
                       catalog: ItemCatalog) -> dict[tuple[str, str], float]:
    """Scale each user's disadvantaged predictions by e^-theta_u; the caller re-ranks."""
    thetas = theta_values(theta_map)
    _require_thetas({u for u, _ in predictions}, thetas)
    corrected = {}
    for (user_id, item_id), value in predictions.items():
        if catalog.label(item_id) is GroupLabel.DISADVANTAGED:
            value = value * math.exp(-thetas[user_id])
        corrected[(user_id, item_id)] = value
    return corrected


def recommendation_log_bias(profile: RecommendationProfile, catalog: ItemCatalog) -> UserBiasScore:
    return user_log_bias(group_geometric_means(profile.ratings, catalog), profile.user_id)


def _scores_of(scores) -> list[UserBiasScore]:
    if isinstance(scores, Mapping):
        scores = scores.values()
    return sorted(scores, key=lambda s: "" if s.user_id is None else str(s.user_id))


def global_bias(scores: Iterable[UserBiasScore] | Mapping[str, UserBiasScore]) -> GlobalBias:
    """gamma estimate: arithmetic mean of the defined log-bias values, summed in user-id order."""
    defined = [s.theta for s in _scores_of(scores) if s.defined]
    if not defined:
        return GlobalBias(None, 0)
    return GlobalBias(float(np.mean(np.asarray(defined))), len(defined))


def theta_histogram(values, bin_width=DEFAULT_BIN_WIDTH) -> pd.DataFrame:
    """Counts per bin [k*w, (k+1)*w), every bin from the lowest to the highest value included."""
    if not bin_width > 0:
        raise ConfigError("Histogram bin width must be positive, got [%s]" % bin_width)
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return pd.DataFrame(columns=HISTOGRAM_COLUMNS)
    # rounding first keeps values sitting on a bin edge out of the bin below
    index = np.floor(np.round(values / bin_width, 9)).astype(np.int64)
    lowest = int(index.min())
    counts = np.bincount(index - lowest)
    bins = np.arange(lowest, lowest + len(counts))
    return pd.DataFrame({
        "bin_lo": np.round(bins * bin_width, 10),
        "bin_hi": np.round((bins + 1) * bin_width, 10),
        "count": counts.astype(np.int64),
    }, columns=HISTOGRAM_COLUMNS)


def bias_frame(scores) -> pd.DataFrame:
    rows = [(s.user_id, s.theta, s.defined, s.m, s.n) for s in _scores_of(scores)]
    return pd.DataFrame(rows, columns=BIAS_COLUMNS)


def save_bias_report(scores, path):
    bias_frame(scores).to_csv(path, index=False, lineterminator="\n")
