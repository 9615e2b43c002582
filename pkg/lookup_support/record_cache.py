#!/usr/bin/env python3
"""Append-only JSON-lines record file keyed by (kind, key).

The same format serves as the on-disk lookup cache and as offline fixtures:

    {"key": "9780000000002", "kind": "author", "value": {"author": "Jane Doe", "resolved": true, "source": "fixture"}}
    {"key": "jane", "kind": "gender", "value": {"gender": "female", "probability": 0.99, "source": "fixture"}}

The first record for a key wins; later duplicates are ignored.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Any, Iterator, Literal

from pydantic import ValidationError

from components.config import StrictModel
from components.errors import InputError

_logger = logging.getLogger(__name__)


class CacheRecord(StrictModel):
    kind: Literal["author", "gender"]
    key: str
    value: dict[str, Any]


def read_records(path) -> Iterator[CacheRecord]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield CacheRecord.model_validate(json.loads(line))
            except (ValueError, ValidationError) as e:
                raise InputError(f"Failed to read record [{path}] line {line_no}: {e}")


class RecordCache:
    def __init__(self, path=None, fixtures=()):
        self.path = Path(path) if path is not None else None
        self._records: dict[tuple[str, str], dict[str, Any]] = {}
        self._lock = threading.Lock()
        self.writes = 0
        for fixture in fixtures:
            self._load(fixture)
        if self.path is not None and self.path.exists():
            self._load(self.path)

    def _load(self, path):
        count = 0
        for record in read_records(path):
            if self._records.setdefault((record.kind, record.key), record.value) is record.value:
                count += 1
        _logger.info("Loaded [%s] records from [%s]", count, path)

    def __len__(self):
        return len(self._records)

    def get(self, kind, key) -> dict[str, Any] | None:
        return self._records.get((kind, key))

    def put(self, kind, key, value: dict[str, Any]) -> bool:
        """Store a record unless the key already exists; returns whether it was written."""
        record = CacheRecord(kind=kind, key=key, value=value)
        with self._lock:
            if (kind, key) in self._records:
                return False
            self._records[(kind, key)] = record.value
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(record.canonical_json() + "\n")
            self.writes += 1
        return True
