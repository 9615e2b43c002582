#!/usr/bin/env python3
"""Synthetic ratings from the multiplicative bias model r = R * e^-p * e^-q[i in D]."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import Field, model_validator
from scipy.stats import truncnorm

from components.config import StrictModel
from components.dataset import GroupLabel, ItemCatalog, RatingsDataset, save_catalog, save_ratings

_logger = logging.getLogger(__name__)

TRUTH_COLUMNS = ["user_id", "alpha", "beta"]
REALIZED_COLUMNS = ["user_id", "item_id", "p", "q"]


class DistributionSpec(StrictModel):
    """Population distribution on [0, inf): point mass, uniform, or normal truncated at 0."""

    family: Literal["point", "uniform", "normal"]
    value: float | None = Field(None, ge=0)
    lo: float | None = Field(None, ge=0)
    hi: float | None = Field(None, ge=0)
    mean: float | None = None
    sd: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _check_parameters(self):
        if self.family == "point" and self.value is None:
            raise ValueError("point family needs 'value'")
        if self.family == "uniform" and (self.lo is None or self.hi is None or self.lo > self.hi):
            raise ValueError("uniform family needs 'lo' <= 'hi'")
        if self.family == "normal" and (self.mean is None or self.sd is None):
            raise ValueError("normal family needs 'mean' and 'sd'")
        return self

    def _truncated(self):
        return truncnorm(a=(0.0 - self.mean) / self.sd, b=np.inf, loc=self.mean, scale=self.sd)

    def expected(self) -> float:
        if self.family == "point":
            return float(self.value)
        if self.family == "uniform":
            return (self.lo + self.hi) / 2.0
        return float(self._truncated().mean())

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "point":
            return self.value if size is None else np.full(size, float(self.value))
        if self.family == "uniform":
            return rng.uniform(self.lo, self.hi, size)
        return self._truncated().rvs(size=size, random_state=rng)


class NoiseSpec(StrictModel):
    """Per-rating spread around a user's mean m, kept symmetric so the mean stays m.

    uniform draws from [m - h, m + h] with h = min(width, m); normal is a
    normal with sd ``width`` truncated to [0, 2m].
    """

    family: Literal["point", "uniform", "normal"] = "normal"
    width: float = Field(0.0, ge=0)

    def sample(self, center: float, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.family == "point" or self.width == 0 or center <= 0:
            return np.full(size, float(center))
        if self.family == "uniform":
            half = min(self.width, center)
            return rng.uniform(center - half, center + half, size)
        bound = center / self.width
        return truncnorm.rvs(-bound, bound, loc=center, scale=self.width, size=size, random_state=rng)


class GenerativeConfig(StrictModel):
    scale_max: float = Field(10.0, gt=0)
    n_users: int = Field(500, ge=1)
    n_items: int = Field(200, ge=1)
    disadvantaged_fraction: float = Field(0.5, ge=0, le=1)
    density: float = Field(1.0, gt=0, le=1)
    alpha: DistributionSpec = DistributionSpec(family="uniform", lo=0.3, hi=0.9)
    p_noise: NoiseSpec = NoiseSpec(family="normal", width=0.2)
    omega: DistributionSpec = DistributionSpec(family="normal", mean=0.2, sd=0.05)
    q_noise: NoiseSpec = NoiseSpec(family="normal", width=0.1)
    seed: int = 0
    clamp_to_scale: bool = False
    retain_realized: bool = True


@dataclass(frozen=True)
class UserTruth:
    user_id: str
    alpha: float
    beta: float


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    ratings: RatingsDataset
    truth: pd.DataFrame
    realized: pd.DataFrame | None = None

    @property
    def catalog(self) -> ItemCatalog:
        return self.ratings.catalog

    def beta_map(self) -> dict[str, float]:
        return dict(zip(self.truth["user_id"], self.truth["beta"]))


def _ids(prefix, count):
    width = max(4, len(str(count)))
    return ["%s%0*d" % (prefix, width, k + 1) for k in range(count)]


def sample_user(config: GenerativeConfig, rng: np.random.Generator) -> tuple[float, float]:
    """(alpha_u, beta_u) for one user."""
    alpha = float(config.alpha.sample(rng))
    beta = float(config.omega.sample(rng))
    return alpha, beta


def rating_value(p, q, disadvantaged, scale_max, clamp=False):
    """R * e^-p, times e^-q on disadvantaged items; works on scalars and arrays."""
    r = scale_max * np.exp(-np.asarray(p, dtype=float) - np.where(disadvantaged, q, 0.0))
    if clamp:
        r = np.clip(r, 1.0, scale_max)
    return r


def generate_rating(truth: UserTruth, disadvantaged: bool, config: GenerativeConfig,
                    rng: np.random.Generator) -> tuple[float, float, float]:
    """One rating (and its realized p, q) for a user with known alpha and beta."""
    p = float(config.p_noise.sample(truth.alpha, rng, 1)[0])
    q = float(config.q_noise.sample(truth.beta, rng, 1)[0]) if disadvantaged else 0.0
    r = float(rating_value(p, q, disadvantaged, config.scale_max, config.clamp_to_scale))
    return r, p, q


def _catalog(config: GenerativeConfig, rng: np.random.Generator) -> ItemCatalog:
    item_ids = _ids("i", config.n_items)
    n_disadvantaged = int(math.floor(config.disadvantaged_fraction * config.n_items + 0.5))
    chosen = set(rng.permutation(config.n_items)[:n_disadvantaged].tolist())
    return ItemCatalog({item_id: GroupLabel.DISADVANTAGED if k in chosen else GroupLabel.ADVANTAGED
                        for k, item_id in enumerate(item_ids)})


def _user_rows(user_id, rng, config, item_ids, disadvantaged):
    alpha, beta = sample_user(config, rng)
    rated = np.flatnonzero(rng.random(len(item_ids)) < config.density)
    in_d = disadvantaged[rated]
    p = config.p_noise.sample(alpha, rng, len(rated))
    q = np.zeros(len(rated))
    q[in_d] = config.q_noise.sample(beta, rng, int(in_d.sum()))
    r = rating_value(p, q, in_d, config.scale_max, config.clamp_to_scale)
    return UserTruth(user_id, alpha, beta), item_ids[rated], r, p, q


def generate_dataset(config: GenerativeConfig) -> SyntheticDataset:
    """Rate every (user, item) pair independently with probability ``density``.

    Each user gets its own stream spawned from the config seed, so any
    subset of users regenerates identically.
    """
    catalog_seed, users_seed = np.random.SeedSequence(config.seed).spawn(2)
    catalog = _catalog(config, np.random.default_rng(catalog_seed))
    item_ids = np.asarray(list(catalog.entries.keys()), dtype=object)
    disadvantaged = catalog.disadvantaged_mask(item_ids)

    truths, frames = [], []
    empty = 0
    for user_id, seed in zip(_ids("u", config.n_users), users_seed.spawn(config.n_users)):
        truth, items, r, p, q = _user_rows(user_id, np.random.default_rng(seed), config, item_ids, disadvantaged)
        truths.append(truth)
        if len(items) == 0:
            empty += 1
            continue
        frames.append(pd.DataFrame({"user_id": user_id, "item_id": items, "rating": r, "p": p, "q": q}))
    if empty:
        _logger.warning("[%s] synthetic users received no ratings at density [%s]", empty, config.density)

    rows = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["user_id", "item_id", "rating", "p", "q"])
    ratings = RatingsDataset(scale_max=config.scale_max,
                             frame=rows[["user_id", "item_id", "rating"]].astype({"rating": float}),
                             catalog=catalog,
                             check_scale=config.clamp_to_scale)
    truth = pd.DataFrame([(t.user_id, t.alpha, t.beta) for t in truths], columns=TRUTH_COLUMNS)
    realized = rows[REALIZED_COLUMNS].reset_index(drop=True) if config.retain_realized else None
    _logger.info("Generated [%s] ratings for [%s] users over [%s] items", ratings.n_ratings,
                 config.n_users, config.n_items)
    return SyntheticDataset(ratings=ratings, truth=truth, realized=realized)


def save_synthetic(sd: SyntheticDataset, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"ratings": directory / "ratings.csv",
             "catalog": directory / "catalog.csv",
             "truth": directory / "truth.csv"}
    save_ratings(sd.ratings, paths["ratings"])
    save_catalog(sd.catalog, paths["catalog"])
    sd.truth.to_csv(paths["truth"], index=False, lineterminator="\n")
    if sd.realized is not None:
        paths["realized"] = directory / "realized.csv"
        sd.realized.to_csv(paths["realized"], index=False, lineterminator="\n")
    return paths
