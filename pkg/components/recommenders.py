#!/usr/bin/env python3
"""Explicit-feedback rating predictors: UserKNN, ItemKNN, ALS and biased SVD."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Mapping

import joblib
import numpy as np
import pandas as pd
from pydantic import Field
from scipy import linalg, sparse

from components.bias import RecommendationProfile
from components.config import StrictModel
from components.errors import ConfigError, InputError, SingularSystemError

_logger = logging.getLogger(__name__)

MODEL_FORMAT = "gender-bias-recommender-model"
MODEL_VERSION = 1
VARIANCE_TOLERANCE = 1e-12
SIMILARITY_DECIMALS = 12
ITEM_BLOCK = 2048


class KnnConfig(StrictModel):
    k: int = Field(40, ge=1)
    similarity: Literal["pearson", "cosine"] = "pearson"
    min_overlap: int = Field(3, ge=1)
    shrink: int = Field(50, ge=0)


class AlsConfig(StrictModel):
    factors: int = Field(32, ge=1)
    reg: float = Field(0.1, ge=0)
    iterations: int = Field(15, ge=1)
    init_scale: float = Field(0.1, gt=0)


class SvdConfig(StrictModel):
    factors: int = Field(32, ge=1)
    learning_rate: float = Field(0.005, gt=0)
    reg: float = Field(0.02, ge=0)
    epochs: int = Field(30, ge=1)
    init_scale: float = Field(0.1, gt=0)


class ModelConfig(StrictModel):
    algorithm: Literal["user-knn", "item-knn", "als", "svd"]
    knn: KnnConfig = KnnConfig()
    als: AlsConfig = AlsConfig()
    svd: SvdConfig = SvdConfig()
    seed: int = 0


def _index(values):
    ordered = sorted(set(values))
    return ordered, {v: k for k, v in enumerate(ordered)}


def _ratings_matrix(frame: pd.DataFrame, user_index, item_index) -> sparse.csr_matrix:
    """users x items CSR over known ids; rows of unknown items are dropped."""
    cols = frame["item_id"].map(item_index)
    known = cols.notna().to_numpy()
    rows = frame["user_id"].map(user_index).to_numpy()[known].astype(np.int64)
    matrix = sparse.csr_matrix((frame["rating"].to_numpy(dtype=float)[known],
                                (rows, cols.to_numpy()[known].astype(np.int64))),
                               shape=(len(user_index), len(item_index)))
    matrix.sort_indices()
    return matrix


def _indicator(m: sparse.csr_matrix) -> sparse.csr_matrix:
    ind = m.copy()
    ind.data = np.ones_like(ind.data)
    return ind


def similarity_rows(a, b, metric="pearson", min_overlap=1, shrink=0):
    """Similarity of every row of ``a`` to every row of ``b`` over their co-rated columns.

    Pearson centres on the co-rated means; cosine is the plain cosine of the
    co-rated ratings. Pairs below ``min_overlap`` or with no variance on
    either side score 0. Returns dense (similarity, overlap) arrays.
    """
    a = sparse.csr_matrix(a, dtype=float)
    b = sparse.csr_matrix(b, dtype=float)
    ia, ib = _indicator(a), _indicator(b)
    overlap = (ia @ ib.T).toarray()
    saa = (a.multiply(a) @ ib.T).toarray()
    sbb = (ia @ b.multiply(b).T).toarray()
    cov = (a @ b.T).toarray()
    if metric == "pearson":
        n = np.maximum(overlap, 1)
        sa = (a @ ib.T).toarray()
        sb = (ia @ b.T).toarray()
        cov = cov - sa * sb / n
        var_a = saa - sa * sa / n
        var_b = sbb - sb * sb / n
        valid = (var_a > VARIANCE_TOLERANCE * saa) & (var_b > VARIANCE_TOLERANCE * sbb)
    elif metric == "cosine":
        var_a, var_b = saa, sbb
        valid = (var_a > 0) & (var_b > 0)
    else:
        raise ConfigError("Unknown similarity [%s]" % metric)

    valid &= overlap >= max(min_overlap, 1)
    sim = np.zeros_like(cov)
    sim[valid] = np.clip(cov[valid] / np.sqrt(var_a[valid] * var_b[valid]), -1.0, 1.0)
    if shrink > 0:
        sim *= np.minimum(overlap, shrink) / shrink
    return sim, overlap


class Recommender:
    algorithm = None

    def __init__(self, config: ModelConfig):
        self.config = config
        self.users: list[str] = []
        self.items: list[str] = []
        self._user_index: dict[str, int] = {}
        self._item_index: dict[str, int] = {}
        self._matrix = sparse.csr_matrix((0, 0))
        self.global_mean = 0.0
        self.item_means = np.zeros(0)
        self.train_user_means = np.zeros(0)
        self._user_means: dict[str, float] = {}
        self._fold_rows: dict[str, sparse.csr_matrix] = {}

    def fit(self, ds, fold_in=None) -> "Recommender":
        frame = ds.frame
        if frame.empty:
            raise InputError("Cannot train [%s] on an empty dataset" % self.algorithm)
        self.users, self._user_index = _index(frame["user_id"])
        self.items, self._item_index = _index(frame["item_id"])
        self._matrix = _ratings_matrix(frame, self._user_index, self._item_index)
        self.global_mean = float(frame["rating"].mean())
        self.item_means = frame.groupby("item_id")["rating"].mean().reindex(self.items).to_numpy(dtype=float)
        user_means = frame.groupby("user_id")["rating"].mean()
        self.train_user_means = user_means.reindex(self.users).to_numpy(dtype=float)
        self._user_means = {u: float(v) for u, v in user_means.items()}

        self._fit()
        _logger.info("Trained [%s] on [%s] ratings from [%s] users over [%s] items",
                     self.algorithm, len(frame), len(self.users), len(self.items))
        if fold_in is not None and not fold_in.frame.empty:
            for user_id, rows in fold_in.frame.groupby("user_id", sort=True):
                self._user_means[user_id] = float(rows["rating"].mean())
                row = _ratings_matrix(rows, {user_id: 0}, self._item_index)
                self._fold_rows[user_id] = row
                self._fold_in(user_id, row)
            _logger.info("Folded in [%s] profiles", len(self._fold_rows))
        return self

    def _fit(self):
        raise NotImplementedError

    def _fold_in(self, user_id, row):
        pass

    def _score(self, user_id, cols: np.ndarray) -> np.ndarray:
        """Scores for known item columns, NaN where the model has no evidence."""
        raise NotImplementedError

    def _profile(self, user_id):
        if user_id in self._fold_rows:
            return self._fold_rows[user_id], None
        k = self._user_index.get(user_id)
        if k is None:
            return None, None
        return self._matrix[k], k

    def knows_user(self, user_id) -> bool:
        return user_id in self._user_means

    def fallback(self, user_id, item_id) -> float:
        if user_id in self._user_means:
            return self._user_means[user_id]
        k = self._item_index.get(item_id)
        if k is not None:
            return float(self.item_means[k])
        return self.global_mean

    def score_candidates(self, user_id, item_ids) -> dict[str, float]:
        item_ids = list(item_ids)
        scores = np.array([self.fallback(user_id, i) for i in item_ids], dtype=float)
        positions = [p for p, i in enumerate(item_ids) if i in self._item_index]
        if positions and self.knows_user(user_id):
            cols = np.array([self._item_index[item_ids[p]] for p in positions], dtype=np.int64)
            model_scores = self._score(user_id, cols)
            have = ~np.isnan(model_scores)
            scores[np.asarray(positions)[have]] = model_scores[have]
        if not np.isfinite(scores).all():
            raise InputError("Non-finite prediction for user [%s]" % user_id)
        return dict(zip(item_ids, scores.tolist()))

    def predict(self, user_id, item_id) -> float:
        return self.score_candidates(user_id, [item_id])[item_id]


class UserKNN(Recommender):
    """Mean-centred neighbour deviations from the k most similar training users who rated the item."""

    algorithm = "user-knn"

    def _fit(self):
        pass

    def _score(self, user_id, cols):
        cfg = self.config.knn
        row, own = self._profile(user_id)
        if row is None or row.nnz == 0:
            return np.full(len(cols), np.nan)
        sims, _ = similarity_rows(row, self._matrix, cfg.similarity, cfg.min_overlap, cfg.shrink)
        sims = sims[0]
        if own is not None:
            sims[own] = 0.0
        neighbors = np.flatnonzero(sims > 0)
        if neighbors.size == 0:
            return np.full(len(cols), np.nan)
        neighbors = neighbors[np.lexsort((neighbors, -np.round(sims[neighbors], SIMILARITY_DECIMALS)))]

        # rows in rank order, so the first k entries of each column are the top-k raters of that item
        sub = self._matrix[neighbors][:, cols].tocsc()
        sub.sort_indices()
        counts = np.diff(sub.indptr)
        rank = np.arange(sub.nnz) - np.repeat(sub.indptr[:-1], counts)
        keep = rank < cfg.k
        col_of = np.repeat(np.arange(len(cols)), counts)[keep]
        rater = neighbors[sub.indices[keep]]
        weights = sims[rater]
        deviations = sub.data[keep] - self.train_user_means[rater]
        num = np.bincount(col_of, weights * deviations, minlength=len(cols))
        den = np.bincount(col_of, weights, minlength=len(cols))
        safe = np.where(den > 0, den, 1.0)
        return np.where(den > 0, self._user_means[user_id] + num / safe, np.nan)


class ItemKNN(Recommender):
    """Item analogue: deviations of the user's own ratings on the k items most similar to the target."""

    algorithm = "item-knn"

    def _fit(self):
        self._item_matrix = self._matrix.T.tocsr()
        self._item_matrix.sort_indices()

    def _score(self, user_id, cols):
        cfg = self.config.knn
        row, _ = self._profile(user_id)
        out = np.full(len(cols), np.nan)
        if row is None or row.nnz == 0:
            return out
        row = row.copy()
        row.sort_indices()
        rated, values = row.indices, row.data
        deviations = values - self.item_means[rated]
        for start in range(0, len(cols), ITEM_BLOCK):
            block = cols[start:start + ITEM_BLOCK]
            sims, _ = similarity_rows(self._item_matrix[block], self._item_matrix[rated], cfg.similarity,
                                      cfg.min_overlap, cfg.shrink)
            sims[block[:, None] == rated[None, :]] = 0.0
            key = np.where(sims > 0, -np.round(sims, SIMILARITY_DECIMALS), np.inf)
            top = np.argsort(key, axis=1, kind="stable")[:, :cfg.k]
            weights = np.take_along_axis(sims, top, axis=1)
            weights = np.where(weights > 0, weights, 0.0)
            num = (weights * deviations[top]).sum(axis=1)
            den = weights.sum(axis=1)
            safe = np.where(den > 0, den, 1.0)
            out[start:start + len(block)] = np.where(den > 0, self.item_means[block] + num / safe, np.nan)
        return out


def ridge_solve(basis: np.ndarray, targets: np.ndarray, reg: float) -> np.ndarray:
    """argmin_x ||basis x - targets||^2 + reg ||x||^2 via the normal equations."""
    f = basis.shape[1]
    gram = basis.T @ basis + reg * np.eye(f)
    rhs = basis.T @ targets
    if reg == 0 and np.linalg.matrix_rank(gram) < f:
        raise SingularSystemError("Normal equations are singular with no regularisation (rank < %s)" % f)
    try:
        return linalg.solve(gram, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularSystemError(f"Failed to solve normal equations: {e}")


def _min_norm_or_ridge(basis, targets, reg):
    if reg > 0:
        return ridge_solve(basis, targets, reg)
    return linalg.lstsq(basis, targets)[0]


class ALS(Recommender):
    """Explicit ALS minimising SSE + reg * (||P||^2 + ||Q||^2) with exact half-steps."""

    algorithm = "als"

    def _fit(self):
        cfg = self.config.als
        rng = np.random.default_rng(self.config.seed)
        n_users, n_items = self._matrix.shape
        self.user_factors = rng.normal(0.0, cfg.init_scale, (n_users, cfg.factors))
        self.item_factors = rng.normal(0.0, cfg.init_scale, (n_items, cfg.factors))
        self._fold_factors: dict[str, np.ndarray] = {}
        by_item = self._matrix.T.tocsr()
        by_item.sort_indices()

        self.objective_trace = [self.objective()]
        for iteration in range(cfg.iterations):
            self._half_step(self._matrix, self.item_factors, self.user_factors)
            self.objective_trace.append(self.objective())
            self._half_step(by_item, self.user_factors, self.item_factors)
            self.objective_trace.append(self.objective())
            _logger.debug("ALS iteration [%s] objective [%s]", iteration + 1, self.objective_trace[-1])

    def _half_step(self, matrix, fixed, target):
        for row in range(matrix.shape[0]):
            start, end = matrix.indptr[row], matrix.indptr[row + 1]
            if start == end:
                target[row] = 0.0
                continue
            target[row] = ridge_solve(fixed[matrix.indices[start:end]], matrix.data[start:end], self.config.als.reg)

    def objective(self) -> float:
        coo = self._matrix.tocoo()
        predicted = np.einsum("ij,ij->i", self.user_factors[coo.row], self.item_factors[coo.col])
        penalty = (self.user_factors ** 2).sum() + (self.item_factors ** 2).sum()
        return float(((coo.data - predicted) ** 2).sum() + self.config.als.reg * penalty)

    def _fold_in(self, user_id, row):
        if row.nnz:
            self._fold_factors[user_id] = _min_norm_or_ridge(self.item_factors[row.indices], row.data,
                                                             self.config.als.reg)

    def _user_vector(self, user_id):
        if user_id in self._fold_rows:
            return self._fold_factors.get(user_id)
        k = self._user_index.get(user_id)
        return None if k is None else self.user_factors[k]

    def _score(self, user_id, cols):
        vector = self._user_vector(user_id)
        if vector is None:
            return np.full(len(cols), np.nan)
        return self.item_factors[cols] @ vector


@dataclass
class SvdParams:
    mu: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray


def svd_errors(params: SvdParams, users, items, ratings) -> np.ndarray:
    predicted = (params.mu + params.user_bias[users] + params.item_bias[items]
                 + np.einsum("ij,ij->i", params.user_factors[users], params.item_factors[items]))
    return ratings - predicted


def svd_loss(params: SvdParams, users, items, ratings, reg) -> float:
    """Squared error plus reg times the squared norms of every parameter touched by each rating."""
    errors = svd_errors(params, users, items, ratings)
    penalty = (params.user_bias[users] ** 2 + params.item_bias[items] ** 2
               + (params.user_factors[users] ** 2).sum(axis=1) + (params.item_factors[items] ** 2).sum(axis=1))
    return float((errors ** 2).sum() + reg * penalty.sum())


def svd_gradient(params: SvdParams, users, items, ratings, reg) -> SvdParams:
    """Analytic gradient of ``svd_loss``; ``mu`` is held fixed and reported as 0."""
    errors = svd_errors(params, users, items, ratings)
    grad = SvdParams(0.0, np.zeros_like(params.user_bias), np.zeros_like(params.item_bias),
                     np.zeros_like(params.user_factors), np.zeros_like(params.item_factors))
    np.add.at(grad.user_bias, users, -2 * errors + 2 * reg * params.user_bias[users])
    np.add.at(grad.item_bias, items, -2 * errors + 2 * reg * params.item_bias[items])
    np.add.at(grad.user_factors, users,
              -2 * errors[:, None] * params.item_factors[items] + 2 * reg * params.user_factors[users])
    np.add.at(grad.item_factors, items,
              -2 * errors[:, None] * params.user_factors[users] + 2 * reg * params.item_factors[items])
    return grad


class BiasedSVD(Recommender):
    """SGD-trained mu + b_u + b_i + p_u . q_i."""

    algorithm = "svd"

    def _fit(self):
        cfg = self.config.svd
        rng = np.random.default_rng(self.config.seed)
        n_users, n_items = self._matrix.shape
        self.params = SvdParams(mu=self.global_mean,
                                user_bias=np.zeros(n_users),
                                item_bias=np.zeros(n_items),
                                user_factors=rng.normal(0.0, cfg.init_scale, (n_users, cfg.factors)),
                                item_factors=rng.normal(0.0, cfg.init_scale, (n_items, cfg.factors)))
        self._fold_params: dict[str, tuple[float, np.ndarray]] = {}
        coo = self._matrix.tocoo()
        self._triples = (coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data)

        self.loss_trace = []
        for epoch in range(cfg.epochs):
            self._epoch(rng.permutation(coo.nnz), cfg.learning_rate, cfg.reg)
            self.loss_trace.append(svd_loss(self.params, *self._triples, cfg.reg))
            _logger.debug("SVD epoch [%s] loss [%s]", epoch + 1, self.loss_trace[-1])

    def _epoch(self, order, lr, reg):
        p = self.params
        users, items, ratings = self._triples
        for k in order:
            u, i, r = users[k], items[k], ratings[k]
            pu = p.user_factors[u].copy()
            qi = p.item_factors[i].copy()
            e = r - (p.mu + p.user_bias[u] + p.item_bias[i] + pu @ qi)
            p.user_bias[u] += lr * (e - reg * p.user_bias[u])
            p.item_bias[i] += lr * (e - reg * p.item_bias[i])
            p.user_factors[u] = pu + lr * (e * qi - reg * pu)
            p.item_factors[i] = qi + lr * (e * pu - reg * qi)

    def _fold_in(self, user_id, row):
        if not row.nnz:
            return
        cols = row.indices
        basis = np.hstack([np.ones((len(cols), 1)), self.params.item_factors[cols]])
        targets = row.data - self.params.mu - self.params.item_bias[cols]
        solution = _min_norm_or_ridge(basis, targets, self.config.svd.reg * len(cols))
        self._fold_params[user_id] = (float(solution[0]), solution[1:])

    def _score(self, user_id, cols):
        p = self.params
        if user_id in self._fold_rows:
            if user_id not in self._fold_params:
                return np.full(len(cols), np.nan)
            bias, vector = self._fold_params[user_id]
        else:
            k = self._user_index.get(user_id)
            if k is None:
                return np.full(len(cols), np.nan)
            bias, vector = p.user_bias[k], p.user_factors[k]
        return p.mu + bias + p.item_bias[cols] + p.item_factors[cols] @ vector


ALGORITHMS = {cls.algorithm: cls for cls in (UserKNN, ItemKNN, ALS, BiasedSVD)}


def train(ds, config: ModelConfig, fold_in=None) -> Recommender:
    """Fit the configured algorithm on ``ds`` and fold in ``fold_in`` profiles."""
    return ALGORITHMS[config.algorithm](config).fit(ds, fold_in=fold_in)


def predict(model: Recommender, user_id, item_id) -> float:
    return model.predict(user_id, item_id)


def predict_pairs(model: Recommender, pairs) -> dict[tuple[str, str], float]:
    by_user: dict[str, list[str]] = {}
    for user_id, item_id in pairs:
        by_user.setdefault(user_id, []).append(item_id)
    out = {}
    for user_id in sorted(by_user):
        for item_id, score in model.score_candidates(user_id, by_user[user_id]).items():
            out[(user_id, item_id)] = score
    return out


def rank_top_n(scores: Mapping[str, float], n: int) -> tuple[list[tuple[str, float]], bool]:
    """Highest scores first, ties by ascending item id; flags lists shorter than n."""
    if n < 1:
        raise ConfigError("List length must be at least 1, got [%s]" % n)
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ordered[:n], len(ordered) < n


def candidate_items(model: Recommender, exclusions=(), catalog=None) -> list[str]:
    excluded = set(exclusions)
    return [i for i in model.items if i not in excluded and (catalog is None or i in catalog)]


def recommend_top_n(model: Recommender, user_id, n: int, exclusions=(), catalog=None) -> RecommendationProfile:
    ranked, truncated = rank_top_n(model.score_candidates(user_id, candidate_items(model, exclusions, catalog)), n)
    if truncated:
        _logger.debug("Only [%s] candidates for user [%s], wanted [%s]", len(ranked), user_id, n)
    return RecommendationProfile(user_id=user_id,
                                 items=tuple(i for i, _ in ranked),
                                 ratings={i: s for i, s in ranked},
                                 truncated=truncated)


def save_model(model: Recommender, path):
    header = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "algorithm": model.algorithm,
              "note": "model files are not guaranteed to load across versions"}
    joblib.dump({"header": header, "model": model}, path)


def load_model(path) -> Recommender:
    try:
        payload = joblib.load(path)
    except Exception as e:
        raise InputError(f"Failed to load model [{path}]: {e}")
    header = payload.get("header", {}) if isinstance(payload, dict) else {}
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise InputError("Model file [%s] has unsupported header [%s]" % (path, header))
    return payload["model"]
