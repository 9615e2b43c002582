#!/usr/bin/env python3
"""End-to-end experiment: prepare, split, estimate bias, train, evaluate, report.

A run directory looks like:

    manifest.json
    input_bias.csv, input_histogram.csv
    cells/<algorithm>/<mode>/metrics.json, user_bias.csv, histogram.csv, recommendations.csv
    summary.csv, significance.csv, comparison.csv, report.txt
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import joblib
import numpy as np
import pandas as pd
import pydantic
import scipy
from joblib import Parallel, delayed
from pydantic import Field, model_validator

from components.bias import (
    RecommendationProfile,
    UserBiasScore,
    bias_frame,
    debias_ratings,
    estimate_user_bias,
    global_bias,
    preference_correct,
    recommendation_log_bias,
    theta_histogram,
    theta_values,
)
from components.config import StrictModel, read_config_file, validate_config
from components.dataset import (
    RatingsDataset,
    Split,
    SplitSpec,
    filter_by_activity,
    load_catalog,
    load_ratings,
    split_users,
)
from components.enrichment import EnrichmentConfig
from components.errors import InputError, UndefinedStatistic
from components.evaluation import (
    EvalConfig,
    MetricsReport,
    aggregate_scores,
    compare,
    compare_bias,
    mae,
    mrr,
    ndcg_at_n,
    relevant_items,
    rmse,
    z_test_left,
)
from components.recommenders import ModelConfig, Recommender, candidate_items, rank_top_n, train
from components.synth import GenerativeConfig, generate_dataset

_logger = logging.getLogger(__name__)

Mode = Literal["baseline", "debias-only", "full"]
MODES: tuple[str, ...] = ("baseline", "debias-only", "full")
MANIFEST = "manifest.json"
SUMMARY_COLUMNS = ["algorithm", "mode", "mean_log_bias", "rmse", "mae", "ndcg", "mrr", "n_users"]
SIGNIFICANCE_COLUMNS = ["algorithm", "mode", "x_bar", "mu", "sigma", "n", "z", "p",
                        "paired_z", "paired_p", "paired_status"]
COMPARISON_COLUMNS = ["algorithm", "mode", "bias_reduction_pct", "rmse_loss_pct", "mae_loss_pct",
                      "ndcg_loss_pct", "mrr_loss_pct"]
EXIT_OK, EXIT_FAILED, EXIT_PARTIAL = 0, 1, 2


class DataConfig(StrictModel):
    ratings: str
    catalog: str
    scale_max: float = Field(gt=0)
    zero_policy: Literal["drop", "reject"] = "drop"
    delimiter: str = ","
    max_bad_rows: int = Field(0, ge=0)


class FilterConfig(StrictModel):
    min_item_ratings: int = Field(0, ge=0)
    min_user_ratings: int = Field(0, ge=0)
    mode: Literal["sequential", "fixpoint"] = "sequential"


class ExperimentConfig(StrictModel):
    name: str = "experiment"
    data: DataConfig | None = None
    synth: GenerativeConfig | None = None
    filter: FilterConfig = FilterConfig()
    split: SplitSpec = SplitSpec()
    models: tuple[ModelConfig, ...] = (ModelConfig(algorithm="user-knn"),)
    modes: tuple[Mode, ...] = MODES
    evaluation: EvalConfig = EvalConfig()
    enrichment: EnrichmentConfig = EnrichmentConfig()
    output_dir: str = "runs/experiment"
    seed: int | None = None
    workers: int = Field(1, ge=1)
    record_timings: bool = False

    @model_validator(mode="after")
    def _check_source(self):
        if (self.data is None) == (self.synth is None):
            raise ValueError("exactly one of 'data' and 'synth' must be given")
        algorithms = [m.algorithm for m in self.models]
        if len(set(algorithms)) != len(algorithms):
            raise ValueError("each algorithm may appear only once in 'models'")
        if not self.modes:
            raise ValueError("at least one mode is required")
        return self

    def resolved(self) -> "ExperimentConfig":
        """Copy with the top-level seed pushed into the split, the generator and every model."""
        if self.seed is None:
            return self
        update = {"split": self.split.model_copy(update={"seed": self.seed}),
                  "models": tuple(m.model_copy(update={"seed": self.seed}) for m in self.models)}
        if self.synth is not None:
            update["synth"] = self.synth.model_copy(update={"seed": self.seed})
        return self.model_copy(update=update)


class RunManifest(StrictModel):
    name: str
    config_fingerprint: str
    partition_hash: str | None = None
    seeds: dict[str, int] = {}
    versions: dict[str, str] = {}
    status: Literal["running", "complete", "partial", "failed"] = "running"
    cells: dict[str, str] = {}
    outputs: tuple[str, ...] = ()
    timings: dict[str, float] = {}
    config: dict = {}


@dataclass
class CellOutcome:
    algorithm: str
    mode: str
    report: MetricsReport | None = None
    error: str | None = None
    seconds: float = 0.0

    @property
    def key(self) -> str:
        return "%s/%s" % (self.algorithm, self.mode)


@dataclass
class RunResult:
    run_dir: Path
    manifest: RunManifest
    outcomes: list[CellOutcome] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.manifest.status)


def exit_code_for(status: str) -> int:
    return {"complete": EXIT_OK, "partial": EXIT_PARTIAL}.get(status, EXIT_FAILED)


def _versions() -> dict[str, str]:
    return {"numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__,
            "pydantic": pydantic.VERSION, "joblib": joblib.__version__}


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(frame: pd.DataFrame, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def prepare_dataset(config: ExperimentConfig) -> RatingsDataset:
    """Loaded (or generated) ratings with the activity filter applied."""
    if config.synth is not None:
        ds = generate_dataset(config.synth).ratings
    else:
        data = config.data
        catalog = load_catalog(data.catalog, delimiter=data.delimiter)
        ds = load_ratings(data.ratings, data.scale_max, zero_policy=data.zero_policy, catalog=catalog,
                          delimiter=data.delimiter, max_bad_rows=data.max_bad_rows)
    f = config.filter
    if f.min_item_ratings or f.min_user_ratings:
        ds = filter_by_activity(ds, max(f.min_item_ratings, 1), max(f.min_user_ratings, 1), f.mode)
    return ds


def write_input_bias(scores, run_dir: Path, bin_width) -> list[str]:
    """Per-user log-bias of the prepared data and its histogram."""
    _write_csv(bias_frame(scores), run_dir / "input_bias.csv")
    defined = [s.theta for s in scores.values() if s.defined]
    _write_csv(theta_histogram(defined, bin_width), run_dir / "input_histogram.csv")
    gamma = global_bias(scores)
    _logger.info("Input log-bias: gamma-hat [%s] over [%s] users", gamma.gamma_hat, gamma.count)
    return ["input_bias.csv", "input_histogram.csv"]


@dataclass
class TrainedModels:
    baseline: Recommender | None
    debiased: Recommender | None


def train_models(split: Split, thetas, model_config: ModelConfig, modes) -> TrainedModels:
    """Raw-data model for baseline, one debiased model shared by debias-only and full."""
    baseline = debiased = None
    if "baseline" in modes:
        baseline = train(split.train, model_config, fold_in=split.visible)
    if "debias-only" in modes or "full" in modes:
        debiased = train(debias_ratings(split.train, thetas), model_config,
                         fold_in=debias_ratings(split.visible, thetas))
    return TrainedModels(baseline, debiased)


@dataclass
class CellData:
    report: MetricsReport
    bias_scores: list[UserBiasScore]
    profiles: list[RecommendationProfile]


def _mode_scores(model, mode, user_id, items, thetas, catalog) -> dict[str, float]:
    scores = model.score_candidates(user_id, items)
    if mode != "full":
        return scores
    corrected = preference_correct({(user_id, i): s for i, s in scores.items()}, thetas, catalog)
    return {i: corrected[(user_id, i)] for i in items}


def _bias_score(user_id, ratings, catalog):
    """θ̃ over positive predictions only; returns (score, number skipped)."""
    positive = {i: r for i, r in ratings.items() if r > 0}
    profile = RecommendationProfile(user_id, tuple(positive), positive)
    return recommendation_log_bias(profile, catalog), len(ratings) - len(positive)


def evaluate_cell(model: Recommender, mode: str, split: Split, thetas, eval_config: EvalConfig,
                  fingerprint: str, algorithm: str = "") -> CellData:
    """Accuracy on held-out ratings, top-N relevance, and recommendation log-bias for one mode."""
    thetas = theta_values(thetas)
    catalog = split.train.require_catalog()
    scale_max = split.train.scale_max
    threshold = eval_config.threshold(scale_max)
    visible = split.visible.frame.groupby("user_id")["item_id"].apply(list).to_dict()
    held = split.held_out.frame.groupby("user_id")

    predicted, truths = [], []
    ndcgs, mrrs, bias_scores, profiles = [], [], [], []
    truncated = skipped = 0
    for user_id, rows in held:
        held_ratings = dict(zip(rows["item_id"], rows["rating"].astype(float)))
        candidates = candidate_items(model, exclusions=visible.get(user_id, ()), catalog=catalog)
        candidate_set = set(candidates)
        extra = [i for i in held_ratings if i not in candidate_set]
        scores = _mode_scores(model, mode, user_id, candidates + extra, thetas, catalog)

        for item_id, truth in held_ratings.items():
            predicted.append(scores[item_id])
            truths.append(truth)

        ranked, short = rank_top_n({i: scores[i] for i in candidates}, eval_config.n)
        truncated += short
        profile = RecommendationProfile(user_id, tuple(i for i, _ in ranked), {i: s for i, s in ranked}, short)
        profiles.append(profile)

        relevant = relevant_items(held_ratings, threshold)
        ndcg = ndcg_at_n(profile, relevant, eval_config.n, graded=eval_config.graded_gains)
        if ndcg is not None:
            ndcgs.append(ndcg)
            mrrs.append(mrr(profile, relevant))

        scope = profile.ratings if eval_config.bias_scope == "top-n" else {i: scores[i] for i in held_ratings}
        score, dropped = _bias_score(user_id, scope, catalog)
        bias_scores.append(score)
        skipped += dropped

    if not truths:
        raise UndefinedStatistic("No held-out ratings to evaluate")
    notes = []
    try:
        aggregate = aggregate_scores(bias_scores, eval_config.bin_width)
        mean_bias, bias_std, bias_count = aggregate.mean, aggregate.std, aggregate.count
    except UndefinedStatistic:
        notes.append("log-bias undefined for every test user")
        mean_bias, bias_std, bias_count = None, None, 0
    if skipped:
        notes.append("%s non-positive predictions left out of the log-bias" % skipped)
        _logger.warning("[%s/%s] left [%s] non-positive predictions out of the log-bias", algorithm, mode, skipped)

    report = MetricsReport(
        config_fingerprint=fingerprint, algorithm=algorithm, mode=mode,
        mean_log_bias=mean_bias, bias_std=bias_std, bias_count=bias_count,
        rmse=rmse(predicted, truths, scale_max), mae=mae(predicted, truths, scale_max),
        ndcg=float(np.mean(ndcgs)) if ndcgs else None, mrr=float(np.mean(mrrs)) if mrrs else None,
        n_users=len(profiles), n_predictions=len(truths), truncated_lists=truncated,
        skipped_nonpositive=skipped, notes=tuple(notes))
    return CellData(report, bias_scores, profiles)


def cell_dir(run_dir: Path, algorithm: str, mode: str) -> Path:
    return Path(run_dir) / "cells" / algorithm / mode


def write_cell(run_dir: Path, data: CellData, bin_width) -> list[str]:
    report = data.report
    directory = cell_dir(run_dir, report.algorithm, report.mode)
    _write_json(directory / "metrics.json", report.model_dump(mode="json"))
    _write_csv(bias_frame(data.bias_scores), directory / "user_bias.csv")
    _write_csv(theta_histogram([s.theta for s in data.bias_scores if s.defined], bin_width),
               directory / "histogram.csv")
    rows = [(p.user_id, rank, item_id, p.ratings[item_id])
            for p in data.profiles for rank, item_id in enumerate(p.items, start=1)]
    _write_csv(pd.DataFrame(rows, columns=["user_id", "rank", "item_id", "score"]),
               directory / "recommendations.csv")
    base = directory.relative_to(run_dir).as_posix()
    return ["%s/%s" % (base, name) for name in ("metrics.json", "user_bias.csv", "histogram.csv", "recommendations.csv")]


def cell_fingerprint(partition_hash: str, model_config: ModelConfig, eval_config: EvalConfig) -> str:
    text = "\n".join([partition_hash, model_config.canonical_json(), eval_config.canonical_json()])
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _run_algorithm(model_config: ModelConfig, config: ExperimentConfig, split: Split, thetas,
                   run_dir: Path) -> tuple[list[CellOutcome], list[str]]:
    outcomes, outputs = [], []
    algorithm = model_config.algorithm
    fingerprint = cell_fingerprint(split.partition_hash(), model_config, config.evaluation)
    try:
        models = train_models(split, thetas, model_config, config.modes)
    except Exception as e:
        _logger.error("Training [%s] failed: %s", algorithm, e)
        return [CellOutcome(algorithm, mode, error="training failed: %s" % e) for mode in config.modes], []

    for mode in config.modes:
        started = time.monotonic()
        model = models.baseline if mode == "baseline" else models.debiased
        try:
            data = evaluate_cell(model, mode, split, thetas, config.evaluation, fingerprint, algorithm)
            outputs.extend(write_cell(run_dir, data, config.evaluation.bin_width))
            outcomes.append(CellOutcome(algorithm, mode, data.report, seconds=time.monotonic() - started))
            _logger.info("Cell [%s/%s] done: bias[%s] rmse[%.4f]", algorithm, mode,
                         data.report.mean_log_bias, data.report.rmse)
        except Exception as e:
            _logger.error("Cell [%s/%s] failed: %s", algorithm, mode, e)
            outcomes.append(CellOutcome(algorithm, mode, error=str(e), seconds=time.monotonic() - started))
    return outcomes, outputs


def _status(outcomes) -> str:
    ok = sum(1 for o in outcomes if o.error is None)
    if ok == len(outcomes) and ok > 0:
        return "complete"
    return "partial" if ok else "failed"


def run_experiment(config: ExperimentConfig, run_dir=None) -> RunResult:
    config = config.resolved()
    run_dir = Path(run_dir or config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seeds = {"split": config.split.seed}
    seeds.update({m.algorithm: m.seed for m in config.models})
    if config.synth is not None:
        seeds["synth"] = config.synth.seed
    manifest = RunManifest(name=config.name, config_fingerprint=config.fingerprint(), seeds=seeds,
                           versions=_versions(), config=config.model_dump(mode="json"),
                           cells={"%s/%s" % (m.algorithm, mode): "pending"
                                  for m in config.models for mode in config.modes})
    _write_json(run_dir / MANIFEST, manifest.model_dump(mode="json"))

    started = time.monotonic()
    try:
        ds = prepare_dataset(config)
        split = split_users(ds, config.split)
        scores = estimate_user_bias(split.train_view())
    except Exception as e:
        _logger.error("Run [%s] failed before any cell: %s", config.name, e)
        manifest = manifest.model_copy(update={"status": "failed",
                                               "cells": {k: "failed: %s" % e for k in manifest.cells}})
        _write_json(run_dir / MANIFEST, manifest.model_dump(mode="json"))
        return RunResult(run_dir, manifest)
    outputs = write_input_bias(scores, run_dir, config.evaluation.bin_width)
    thetas = theta_values(scores)

    per_algorithm = Parallel(n_jobs=config.workers, prefer="threads")(
        delayed(_run_algorithm)(m, config, split, thetas, run_dir) for m in config.models)
    outcomes = [o for cell_outcomes, _ in per_algorithm for o in cell_outcomes]
    for _, cell_outputs in per_algorithm:
        outputs.extend(cell_outputs)

    outputs.extend(write_report(run_dir, config.models, config.modes))
    status = _status(outcomes)
    timings = {}
    if config.record_timings:
        timings = {o.key: round(o.seconds, 3) for o in outcomes}
        timings["total"] = round(time.monotonic() - started, 3)
    manifest = manifest.model_copy(update={
        "partition_hash": split.partition_hash(),
        "status": status,
        "cells": {o.key: "ok" if o.error is None else "failed: %s" % o.error for o in outcomes},
        "outputs": tuple(outputs),
        "timings": timings,
    })
    _write_json(run_dir / MANIFEST, manifest.model_dump(mode="json"))
    _logger.info("Run [%s] %s in %.1fs", config.name, status, time.monotonic() - started)
    return RunResult(run_dir, manifest, outcomes)


def read_manifest(run_dir) -> RunManifest:
    path = Path(run_dir) / MANIFEST
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise InputError(f"Failed to read manifest [{path}]: {e}")


def _read_cell(run_dir, algorithm, mode):
    directory = cell_dir(run_dir, algorithm, mode)
    metrics = directory / "metrics.json"
    if not metrics.exists():
        return None, None
    report = MetricsReport.model_validate_json(metrics.read_text(encoding="utf-8"))
    frame = pd.read_csv(directory / "user_bias.csv", dtype={"user_id": str})
    defined = frame[frame["defined"].astype(bool)]
    return report, dict(zip(defined["user_id"], defined["theta"].astype(float)))


def _significance_row(algorithm, mode, base, base_thetas, report, thetas):
    row = dict.fromkeys(SIGNIFICANCE_COLUMNS)
    row.update(algorithm=algorithm, mode=mode)
    try:
        test = z_test_left(report.mean_log_bias, base.mean_log_bias, base.bias_std, report.bias_count)
        row.update(x_bar=test.x_bar, mu=test.mu, sigma=test.sigma, n=test.n, z=test.z, p=test.p)
    except (UndefinedStatistic, TypeError) as e:
        _logger.warning("No z-test for [%s/%s]: %s", algorithm, mode, e)
    paired = compare_bias(thetas, base_thetas)
    row.update(paired_status=paired.status)
    if paired.defined:
        row.update(paired_z=paired.result.z, paired_p=paired.result.p)
    else:
        _logger.warning("No paired z-test for [%s/%s]: %s", algorithm, mode, paired.reason)
    return row


def write_report(run_dir, models=None, modes=None) -> list[str]:
    """Summary, significance and comparison tables plus report.txt, rebuilt from the cell files."""
    run_dir = Path(run_dir)
    if models is None or modes is None:
        config = ExperimentConfig.model_validate(read_manifest(run_dir).config)
        models, modes = config.models, config.modes

    summary, significance, comparison, lines, missing = [], [], [], [], []
    for model_config in models:
        algorithm = model_config.algorithm
        cells = {mode: _read_cell(run_dir, algorithm, mode) for mode in modes}
        for mode in modes:
            report, _ = cells[mode]
            if report is None:
                missing.append("%s/%s" % (algorithm, mode))
                summary.append({"algorithm": algorithm, "mode": mode})
                continue
            summary.append({"algorithm": algorithm, "mode": mode, "mean_log_bias": report.mean_log_bias,
                            "rmse": report.rmse, "mae": report.mae, "ndcg": report.ndcg,
                            "mrr": report.mrr, "n_users": report.n_users})
            for key in ("mean_log_bias", "bias_std", "bias_count", "rmse", "mae", "ndcg", "mrr", "n_users"):
                lines.append("%s.%s.%s=%s" % (algorithm, mode, key, getattr(report, key)))

        base, base_thetas = cells.get("baseline", (None, None))
        if base is None:
            continue
        for mode in modes:
            report, thetas = cells[mode]
            if mode == "baseline" or report is None:
                continue
            significance.append(_significance_row(algorithm, mode, base, base_thetas, report, thetas))
            comparison.append({"algorithm": algorithm, "mode": mode, **compare(base, report).rounded()})

    outputs = {"summary.csv": pd.DataFrame(summary, columns=SUMMARY_COLUMNS),
               "significance.csv": pd.DataFrame(significance, columns=SIGNIFICANCE_COLUMNS),
               "comparison.csv": pd.DataFrame(comparison, columns=COMPARISON_COLUMNS)}
    for name, frame in outputs.items():
        _write_csv(frame, run_dir / name)
    lines.append("missing_cells=%s" % ",".join(missing))
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if missing:
        _logger.warning("Report has gaps for cells: %s", ", ".join(missing))
    return list(outputs) + ["report.txt"]


def report_status(run_dir) -> int:
    """Exit code for ``report``: partial when any configured cell has no metrics."""
    text = (Path(run_dir) / "report.txt").read_text(encoding="utf-8")
    missing = [line for line in text.splitlines() if line.startswith("missing_cells=")]
    if missing and missing[-1] != "missing_cells=":
        return EXIT_PARTIAL
    return EXIT_OK


def load_experiment_config(path, overrides: dict | None = None) -> ExperimentConfig:
    data = read_config_file(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return validate_config(ExperimentConfig, data, source=str(path))

