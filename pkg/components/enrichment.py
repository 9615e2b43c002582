#!/usr/bin/env python3
"""ISBN -> author -> author gender -> item group, through cached external lookups."""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Literal, Sequence

import pandas as pd
from pydantic import Field

from components.config import StrictModel
from components.dataset import GroupLabel, ItemCatalog
from components.errors import InputError, ProviderFailure
from lookup_support.providers import build_provider
from lookup_support.record_cache import RecordCache

_logger = logging.getLogger(__name__)

DROP_COLUMNS = ["isbn", "reason", "detail"]
AUTHOR_UNRESOLVED = "author-unresolved"
GENDER_UNKNOWN = "gender-unknown"
HONORIFICS = {"dr", "mr", "mrs", "ms", "miss", "prof", "professor", "sir", "dame", "lady", "lord", "rev", "fr"}
AUTHOR_SEPARATORS = re.compile(r"\s*(?:;|&|\band\b)\s*", re.IGNORECASE)


class Gender(Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


class EnrichmentConfig(StrictModel):
    author_providers: tuple[str, ...] = ("google_books", "isbndb", "open_library")
    gender_provider: str | None = "genderize"
    confidence_threshold: float = Field(0.9, ge=0, le=1)
    gender_groups: dict[str, Literal["A", "D"]] = {"female": "D", "male": "A"}
    cache_path: str | None = None
    fixtures: tuple[str, ...] = ()
    offline: bool = False
    max_in_flight: int = Field(4, ge=1)
    requests_per_second: float = Field(1.0, ge=0)
    timeout: float = Field(10.0, gt=0)
    max_retries: int = Field(3, ge=1)


@dataclass(frozen=True)
class AuthorRecord:
    isbn: str
    author_full_name: str
    first_name: str
    source: str


@dataclass(frozen=True)
class Unresolved:
    isbn: str
    detail: str = "no-match"


@dataclass(frozen=True)
class GenderInference:
    first_name: str
    gender: Gender
    confidence: float
    failed: bool = False
    source: str = ""


@dataclass
class DropReport:
    entries: list[tuple[str, str, str]] = field(default_factory=list)

    def add(self, isbn, reason, detail=""):
        self.entries.append((isbn, reason, detail))

    def __len__(self):
        return len(self.entries)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.entries, columns=DROP_COLUMNS)

    def save(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def normalize_isbn(text) -> str:
    """Digits (and a final X for ISBN-10) with separators removed; check digit validated."""
    isbn = re.sub(r"[\s-]", "", str(text)).upper()
    if re.fullmatch(r"\d{9}[\dX]", isbn):
        total = sum((10 - k) * (10 if c == "X" else int(c)) for k, c in enumerate(isbn))
        if total % 11 == 0:
            return isbn
    elif re.fullmatch(r"\d{13}", isbn):
        total = sum(int(c) * (1 if k % 2 == 0 else 3) for k, c in enumerate(isbn))
        if total % 10 == 0:
            return isbn
    raise InputError("Invalid ISBN [%s]" % text)


def first_author(author_string: str) -> str:
    return AUTHOR_SEPARATORS.split(author_string.strip())[0].strip()


def first_name_of(author_string: str) -> str | None:
    """First name of the first-listed author; handles "Last, First" and leading honorifics."""
    author = first_author(author_string or "")
    if "," in author:
        last, rest = author.split(",", 1)
        # a single-word head means "Last, First"; otherwise the comma separates authors
        author = rest.split(",")[0] if len(last.split()) == 1 else last
    for token in author.split():
        token = token.strip(".,;:'\"()")
        if token and token.lower() not in HONORIFICS:
            return token
    return None


def _author_from_record(isbn, value) -> AuthorRecord | Unresolved:
    if not value.get("resolved"):
        return Unresolved(isbn, "cached-miss")
    author = value["author"]
    return AuthorRecord(isbn, author, first_name_of(author) or "", value.get("source", "cache"))


def resolve_author(isbn, provider_chain: Sequence, cache: RecordCache) -> AuthorRecord | Unresolved:
    """First author found by the provider chain, consulting and filling the cache."""
    isbn = normalize_isbn(isbn)
    cached = cache.get("author", isbn)
    if cached is not None:
        return _author_from_record(isbn, cached)

    failures = 0
    for provider in provider_chain:
        try:
            authors = provider.lookup(isbn)
        except ProviderFailure as e:
            failures += 1
            _logger.warning("Provider [%s] failed for ISBN [%s]: %s", provider.provider_id, isbn, e)
            continue
        for author in authors:
            first = first_name_of(author)
            if first:
                cache.put("author", isbn, {"resolved": True, "author": author, "source": provider.provider_id})
                return AuthorRecord(isbn, author, first, provider.provider_id)
        _logger.debug("Provider [%s] has no author for ISBN [%s]", provider.provider_id, isbn)

    if failures:
        return Unresolved(isbn, "provider-failure")
    if provider_chain:
        cache.put("author", isbn, {"resolved": False})
    return Unresolved(isbn, "no-match")


def _apply_threshold(name, value, threshold) -> GenderInference:
    gender = value.get("gender") or "unknown"
    confidence = float(value.get("probability", 0.0))
    source = value.get("source", "cache")
    if gender not in (Gender.FEMALE.value, Gender.MALE.value) or confidence < threshold:
        return GenderInference(name, Gender.UNKNOWN, confidence, source=source)
    return GenderInference(name, Gender(gender), confidence, source=source)


def infer_gender(first_name, threshold: float, cache: RecordCache, provider=None) -> GenderInference:
    """Gender of a first name; answers below ``threshold`` confidence come back unknown.

    The raw provider answer is cached, so the threshold can change between runs.
    """
    name = (first_name or "").strip()
    if not name:
        raise InputError("Cannot infer gender of an empty first name")
    key = name.lower()
    cached = cache.get("gender", key)
    if cached is None:
        if provider is None:
            return GenderInference(name, Gender.UNKNOWN, 0.0, failed=True)
        try:
            gender, probability = provider.lookup(key)
        except ProviderFailure as e:
            _logger.warning("Provider [%s] failed for name [%s]: %s", provider.provider_id, name, e)
            return GenderInference(name, Gender.UNKNOWN, 0.0, failed=True)
        cached = {"gender": gender or "unknown", "probability": probability, "source": provider.provider_id}
        cache.put("gender", key, cached)
    return _apply_threshold(name, cached, threshold)


def build_cache(config: EnrichmentConfig) -> RecordCache:
    return RecordCache(config.cache_path, fixtures=[Path(p) for p in config.fixtures])


def build_providers(config: EnrichmentConfig, session=None):
    """(author chain, gender provider) for live mode; offline mode gets ([], None)."""
    if config.offline:
        return [], None
    options = dict(session=session, rps=config.requests_per_second, timeout=config.timeout,
                   max_retries=config.max_retries)
    chain = [p for p in (build_provider(name, **options) for name in config.author_providers) if p is not None]
    gender = build_provider(config.gender_provider, **options) if config.gender_provider else None
    return chain, gender


def enrich_catalog(isbn_list, config: EnrichmentConfig, cache: RecordCache | None = None,
                   provider_chain=None, gender_provider=None, session=None) -> tuple[ItemCatalog, DropReport]:
    """Label every item id as advantaged or disadvantaged, or record why it was dropped.

    Item ids are kept exactly as given; the ISBN is normalised only for lookups.
    Results come back in input order whatever order the lookups finish in.
    """
    cache = cache if cache is not None else build_cache(config)
    if provider_chain is None and gender_provider is None:
        provider_chain, gender_provider = build_providers(config, session=session)
    provider_chain = provider_chain or []

    item_ids = list(dict.fromkeys(isbn_list))
    if len(item_ids) != len(isbn_list):
        _logger.warning("Ignored [%s] duplicate item ids", len(isbn_list) - len(item_ids))

    def label_one(item_id):
        try:
            author = resolve_author(item_id, provider_chain, cache)
        except InputError:
            return item_id, None, (AUTHOR_UNRESOLVED, "invalid-isbn")
        if isinstance(author, Unresolved) or not author.first_name:
            detail = author.detail if isinstance(author, Unresolved) else "no-first-name"
            return item_id, None, (AUTHOR_UNRESOLVED, detail)
        inference = infer_gender(author.first_name, config.confidence_threshold, cache, gender_provider)
        group = config.gender_groups.get(inference.gender.value)
        if group is None:
            detail = "provider-failure" if inference.failed else "%s:%.2f" % (author.first_name, inference.confidence)
            return item_id, None, (GENDER_UNKNOWN, detail)
        return item_id, GroupLabel.parse(group), None

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        results = list(pool.map(label_one, item_ids))

    labels, report = {}, DropReport()
    for item_id, label, drop in results:
        if label is None:
            report.add(item_id, *drop)
        else:
            labels[item_id] = label
    catalog = ItemCatalog(labels)
    _logger.info("Labelled [%s] of [%s] items (advantaged[%s] disadvantaged[%s]), dropped [%s]",
                 len(catalog), len(item_ids), catalog.counts[GroupLabel.ADVANTAGED],
                 catalog.counts[GroupLabel.DISADVANTAGED], len(report))
    return catalog, report
