#!/usr/bin/env python3
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Literal, Mapping

import numpy as np
import pandas as pd
from pydantic import Field

from components.config import StrictModel
from components.errors import (
    ConfigError,
    EmptyAfterFilter,
    InputError,
    MalformedRowError,
    NotFound,
    RowError,
    ScaleError,
    ZeroRatingError,
)

_logger = logging.getLogger(__name__)

RATING_COLUMNS = ["user_id", "item_id", "rating"]
CATALOG_COLUMNS = ["item_id", "group"]


class GroupLabel(Enum):
    ADVANTAGED = "A"
    DISADVANTAGED = "D"

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(text).strip().upper())
        except ValueError:
            raise InputError("Unknown group label [%s], expected A or D" % text)


@dataclass(frozen=True)
class ItemCatalog:
    entries: Mapping[str, GroupLabel]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(sorted(self.entries.items())))

    def __contains__(self, item_id):
        return item_id in self.entries

    def __len__(self):
        return len(self.entries)

    def label(self, item_id) -> GroupLabel:
        try:
            return self.entries[item_id]
        except KeyError:
            raise NotFound("Item [%s] is not in the catalog" % item_id)

    @property
    def counts(self) -> dict[GroupLabel, int]:
        counts = {GroupLabel.ADVANTAGED: 0, GroupLabel.DISADVANTAGED: 0}
        for label in self.entries.values():
            counts[label] += 1
        return counts

    def disadvantaged_mask(self, item_ids) -> np.ndarray:
        """Boolean array, True where the item is disadvantaged. Unknown items raise NotFound."""
        labels = pd.Series(np.asarray(item_ids, dtype=object)).map(self.entries)
        if labels.isna().any():
            missing = pd.Series(item_ids)[labels.isna().to_numpy()].iloc[0]
            raise NotFound("Item [%s] is not in the catalog" % missing)
        return (labels == GroupLabel.DISADVANTAGED).to_numpy(dtype=bool)

    def restrict(self, item_ids) -> "ItemCatalog":
        keep = set(item_ids)
        return ItemCatalog({i: g for i, g in self.entries.items() if i in keep})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"item_id": list(self.entries.keys()),
                             "group": [g.value for g in self.entries.values()]},
                            columns=CATALOG_COLUMNS)


@dataclass(frozen=True)
class LoadReport:
    path: str
    rows_read: int
    retained: int
    dropped_zero: int
    duplicates: int
    dropped_unlabeled: int
    bad_rows: tuple[RowError, ...] = ()


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Sparse user x item ratings on the scale [1, scale_max].

    ``check_scale=False`` admits values outside the scale; it is used for
    unclamped synthetic data, where the generative model can fall below 1.
    """

    scale_max: float
    frame: pd.DataFrame
    catalog: ItemCatalog | None = None
    load_report: LoadReport | None = None
    check_scale: bool = True

    def __post_init__(self):
        if not self.scale_max > 0:
            raise InputError("scale_max must be positive, got [%s]" % self.scale_max)
        frame = _canonical_frame(self.frame)
        if self.check_scale and len(frame):
            ratings = frame["rating"].to_numpy()
            bad = (ratings < 1) | (ratings > self.scale_max)
            if bad.any():
                row = frame[bad].iloc[0]
                raise InputError("Rating [%s] for (%s, %s) outside [1, %s]"
                                 % (row.rating, row.user_id, row.item_id, self.scale_max))
        if self.catalog is not None and len(frame):
            unknown = ~frame["item_id"].isin(self.catalog.entries.keys())
            if unknown.any():
                raise InputError("Rated item [%s] is not in the catalog" % frame.loc[unknown, "item_id"].iloc[0])
        object.__setattr__(self, "frame", frame)

    @property
    def n_ratings(self) -> int:
        return len(self.frame)

    @property
    def users(self) -> np.ndarray:
        return np.asarray(self.frame["user_id"].unique(), dtype=object)

    @property
    def items(self) -> np.ndarray:
        return np.asarray(np.sort(self.frame["item_id"].unique()), dtype=object)

    @property
    def n_users(self) -> int:
        return int(self.frame["user_id"].nunique())

    @property
    def n_items(self) -> int:
        return int(self.frame["item_id"].nunique())

    def require_catalog(self) -> ItemCatalog:
        if self.catalog is None:
            raise InputError("Dataset has no item catalog; run enrichment first")
        return self.catalog

    def disadvantaged_mask(self) -> np.ndarray:
        return self.require_catalog().disadvantaged_mask(self.frame["item_id"].to_numpy())

    def with_frame(self, frame: pd.DataFrame) -> "RatingsDataset":
        return replace(self, frame=frame, load_report=None)


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    ratings: Mapping[str, float] = field(default_factory=dict)

    @property
    def items(self) -> frozenset[str]:
        return frozenset(self.ratings)


class SplitSpec(StrictModel):
    test_user_fraction: float = Field(0.2, gt=0, lt=1)
    per_test_user_holdout_fraction: float = Field(0.5, gt=0, lt=1)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Split:
    """Training users, plus each test user's (visible, held-out) partition."""

    train: RatingsDataset
    visible: RatingsDataset
    held_out: RatingsDataset
    test_users: tuple[str, ...]
    excluded_users: tuple[str, ...] = ()

    def train_view(self) -> RatingsDataset:
        """Everything a model or the bias estimator may see: no held-out ratings."""
        frame = pd.concat([self.train.frame, self.visible.frame], ignore_index=True)
        return self.train.with_frame(frame)

    def partition_hash(self) -> str:
        digest = hashlib.sha256()
        for part in (self.train, self.visible, self.held_out):
            digest.update(part.frame.to_csv(index=False, lineterminator="\n").encode("utf-8"))
            digest.update(b"\x00")
        return digest.hexdigest()


def _canonical_frame(frame: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in RATING_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError("Ratings frame lacks columns %s" % missing)
    frame = frame[RATING_COLUMNS].astype({"user_id": str, "item_id": str, "rating": "float64"})
    if frame.duplicated(["user_id", "item_id"]).any():
        raise InputError("Ratings frame holds more than one rating per (user, item)")
    if not np.isfinite(frame["rating"].to_numpy()).all():
        raise InputError("Ratings frame holds non-finite ratings")
    return frame.sort_values(["user_id", "item_id"], kind="mergesort").reset_index(drop=True)


def _row_reader(handle, delimiter):
    if not isinstance(delimiter, str) or len(delimiter) != 1:
        raise ConfigError("Delimiter must be a single character, got [%s]" % delimiter)
    return csv.reader(handle, delimiter=delimiter, skipinitialspace=True)


def _parse_row(segments, line_no, scale_max, zero_policy):
    segments = [segment.strip() for segment in segments]
    if len(segments) != 3:
        raise MalformedRowError(line_no, "expected 3 fields, saw %s" % len(segments))
    user_id, item_id, raw = segments
    if not user_id or not item_id:
        raise MalformedRowError(line_no, "empty user or item id")
    try:
        rating = float(raw)
    except ValueError:
        raise MalformedRowError(line_no, "rating [%s] is not a number" % raw)
    if not math.isfinite(rating):
        raise MalformedRowError(line_no, "rating [%s] is not finite" % raw)
    if rating == 0:
        if zero_policy == "reject":
            raise ZeroRatingError(line_no, "zero rating (implicit feedback) rejected")
        return user_id, item_id, None
    if rating < 1 or rating > scale_max:
        raise ScaleError(line_no, "rating [%s] outside [1, %s]" % (raw, scale_max))
    return user_id, item_id, rating


def load_ratings(path, scale_max, zero_policy: Literal["drop", "reject"] = "drop",
                 catalog: ItemCatalog | None = None, delimiter=",", max_bad_rows=0) -> RatingsDataset:
    """Read a delimited ``user_id,item_id,rating`` file.

    Zero ratings are dropped or rejected per ``zero_policy``; a repeated
    (user, item) keeps the last occurrence. Malformed rows are skipped and
    reported until more than ``max_bad_rows`` of them have been seen, at
    which point the last one is raised. Out-of-scale ratings always raise.
    When a catalog is given, ratings of items outside it are dropped.
    """
    if zero_policy not in ("drop", "reject"):
        raise ConfigError("zero_policy must be drop or reject, got [%s]" % zero_policy)
    path = Path(path)
    triples = {}
    rows_read = dropped_zero = duplicates = 0
    bad_rows = []

    if not path.is_file():
        raise InputError("Ratings file [%s] does not exist" % path)
    try:
        with path.open(encoding="utf-8", newline="") as handle:
            reader = _row_reader(handle, delimiter)
            header = [h.strip() for h in next(reader, [])]
            if len(header) != 3:
                raise MalformedRowError(1, "header must have 3 fields, saw %s" % len(header))
            if [h.lower() for h in header] != RATING_COLUMNS:
                _logger.info("Treating header %s of [%s] as %s", header, path, RATING_COLUMNS)

            for segments in reader:
                if not any(s.strip() for s in segments):
                    continue
                rows_read += 1
                try:
                    user_id, item_id, rating = _parse_row(segments, reader.line_num, scale_max, zero_policy)
                except MalformedRowError as e:
                    bad_rows.append(e)
                    _logger.warning("[%s] Received bad row in [%s]: %s", len(bad_rows), path, e)
                    if len(bad_rows) > max_bad_rows:
                        raise
                    continue
                if rating is None:
                    dropped_zero += 1
                    continue
                key = (user_id, item_id)
                if key in triples:
                    duplicates += 1
                triples[key] = rating
    except (UnicodeDecodeError, csv.Error) as e:
        raise InputError(f"Failed to read ratings [{path}]: {e}")

    frame = pd.DataFrame([(u, i, r) for (u, i), r in triples.items()], columns=RATING_COLUMNS)
    dropped_unlabeled = 0
    if catalog is not None:
        labeled = frame["item_id"].isin(catalog.entries.keys())
        dropped_unlabeled = int((~labeled).sum())
        frame = frame[labeled]

    report = LoadReport(path=str(path), rows_read=rows_read, retained=len(frame), dropped_zero=dropped_zero,
                        duplicates=duplicates, dropped_unlabeled=dropped_unlabeled, bad_rows=tuple(bad_rows))
    _logger.info("Loaded [%s] ratings from [%s]: zero-dropped[%s] duplicates[%s] unlabeled[%s] bad[%s]",
                 report.retained, path, dropped_zero, duplicates, dropped_unlabeled, len(bad_rows))
    return RatingsDataset(scale_max=float(scale_max), frame=frame, catalog=catalog, load_report=report)


def load_catalog(path, delimiter=",") -> ItemCatalog:
    path = Path(path)
    if not path.is_file():
        raise InputError("Catalog file [%s] does not exist" % path)
    try:
        frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except (UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"Failed to read catalog [{path}]: {e}")
    if list(frame.columns) != CATALOG_COLUMNS:
        raise InputError("Catalog [%s] must have header %s, saw %s" % (path, CATALOG_COLUMNS, list(frame.columns)))
    if frame["item_id"].duplicated().any():
        raise InputError("Catalog [%s] lists item [%s] twice"
                         % (path, frame.loc[frame["item_id"].duplicated(), "item_id"].iloc[0]))
    return ItemCatalog({row.item_id: GroupLabel.parse(row.group) for row in frame.itertuples(index=False)})


def save_ratings(ds: RatingsDataset, path, delimiter=","):
    """Canonical form: sorted by (user, item), so identical data gives identical bytes."""
    ds.frame.to_csv(path, index=False, sep=delimiter, lineterminator="\n")


def save_catalog(catalog: ItemCatalog, path, delimiter=","):
    catalog.to_frame().to_csv(path, index=False, sep=delimiter, lineterminator="\n")


def _keep_items(frame, min_item_ratings):
    counts = frame.groupby("item_id")["item_id"].transform("size")
    return frame[counts >= min_item_ratings]


def _keep_users(frame, min_user_ratings):
    counts = frame.groupby("user_id")["user_id"].transform("size")
    return frame[counts >= min_user_ratings]


def filter_by_activity(ds: RatingsDataset, min_item_ratings, min_user_ratings,
                       mode: Literal["sequential", "fixpoint"] = "sequential") -> RatingsDataset:
    """Drop rarely rated items, then light users.

    ``sequential`` makes one pass (items first, then users); ``fixpoint``
    repeats both until neither removes anything, which yields the k-core.
    """
    if min_item_ratings < 1 or min_user_ratings < 1:
        raise ConfigError("Activity thresholds must be >= 1, got (%s, %s)" % (min_item_ratings, min_user_ratings))
    frame = ds.frame
    if mode == "sequential":
        frame = _keep_users(_keep_items(frame, min_item_ratings), min_user_ratings)
    elif mode == "fixpoint":
        passes = 0
        while True:
            passes += 1
            before = len(frame)
            frame = _keep_users(_keep_items(frame, min_item_ratings), min_user_ratings)
            if len(frame) == before:
                break
        _logger.debug("Activity filter reached a fixpoint after [%s] passes", passes)
    else:
        raise ConfigError("Unknown filter mode [%s]" % mode)

    if frame.empty:
        raise EmptyAfterFilter("No ratings left after filtering with items>=%s users>=%s (%s)"
                               % (min_item_ratings, min_user_ratings, mode))
    catalog = ds.catalog.restrict(frame["item_id"].unique()) if ds.catalog is not None else None
    _logger.info("Activity filter kept [%s] of [%s] ratings", len(frame), ds.n_ratings)
    return replace(ds, frame=frame, catalog=catalog, load_report=None)


def _half_up(x):
    return int(math.floor(x + 0.5))


def split_users(ds: RatingsDataset, spec: SplitSpec) -> Split:
    """Hold out a random fraction of users and half (by default) of each one's ratings."""
    if ds.n_ratings == 0:
        raise InputError("Cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    users = ds.users
    n_test = _half_up(spec.test_user_fraction * len(users))
    chosen = sorted(rng.permutation(users)[:n_test])

    counts = ds.frame.groupby("user_id").size()
    test_users = [u for u in chosen if counts[u] >= 2]
    excluded = [u for u in chosen if counts[u] < 2]
    if excluded:
        _logger.warning("Excluded [%s] sampled test users with fewer than 2 ratings", len(excluded))

    is_test = ds.frame["user_id"].isin(test_users).to_numpy()
    test_frame = ds.frame[is_test].reset_index(drop=True)
    held = np.zeros(len(test_frame), dtype=bool)
    positions = test_frame.groupby("user_id").indices
    for user_id in test_users:
        rows = positions[user_id]
        k = min(max(_half_up(spec.per_test_user_holdout_fraction * len(rows)), 1), len(rows) - 1)
        held[rows[rng.permutation(len(rows))[:k]]] = True

    split = Split(train=ds.with_frame(ds.frame[~is_test]),
                  visible=ds.with_frame(test_frame[~held]),
                  held_out=ds.with_frame(test_frame[held]),
                  test_users=tuple(test_users),
                  excluded_users=tuple(excluded))
    _logger.info("Split [%s] users: test[%s] excluded[%s] visible[%s] held-out[%s]", len(users),
                 len(test_users), len(excluded), split.visible.n_ratings, split.held_out.n_ratings)
    return split


def user_profile(ds: RatingsDataset, user_id) -> UserProfile:
    rows = ds.frame[ds.frame["user_id"] == user_id]
    if rows.empty:
        raise NotFound("User [%s] has no ratings in this view" % user_id)
    return UserProfile(user_id, dict(zip(rows["item_id"], rows["rating"].astype(float))))


def iter_profiles(ds: RatingsDataset) -> Iterator[UserProfile]:
    """All user profiles in user-id order."""
    for user_id, rows in ds.frame.groupby("user_id", sort=True):
        yield UserProfile(user_id, dict(zip(rows["item_id"], rows["rating"].astype(float))))


def dataset_summary(ds: RatingsDataset) -> dict[str, int]:
    """Group sizes over the items actually rated, plus user and rating counts."""
    mask = ds.require_catalog().disadvantaged_mask(ds.items) if ds.n_ratings else np.zeros(0, dtype=bool)
    return {
        "advantaged_items": int((~mask).sum()),
        "disadvantaged_items": int(mask.sum()),
        "users": ds.n_users,
        "ratings": ds.n_ratings,
    }
