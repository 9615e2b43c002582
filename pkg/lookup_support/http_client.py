#!/usr/bin/env python3
"""requests session wrapper with retry, backoff and a per-client request rate."""

from __future__ import annotations

import logging
import threading
import time
from typing import Any

import requests
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from components.errors import ProviderFailure

_logger = logging.getLogger(__name__)


class TransientHttpError(Exception):
    """Status codes worth retrying (429 and 5xx)."""


class RateLimiter:
    """Spaces calls at least 1/rps seconds apart across threads. rps <= 0 disables it."""

    def __init__(self, rps: float):
        self.rps = rps
        self._last_call = 0.0
        self._lock = threading.Lock()

    def wait(self):
        if self.rps <= 0:
            return
        with self._lock:
            delay = self._last_call + 1.0 / self.rps - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            self._last_call = time.monotonic()


class HttpClient:
    def __init__(self, *, timeout: float = 10.0, max_retries: int = 3, rps: float = 1.0,
                 backoff: float = 1.0, session: requests.Session | None = None):
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.rate_limiter = RateLimiter(rps)
        self.session = session or requests.Session()

    def get_json(self, url: str, **kwargs: Any) -> Any | None:
        """Decoded JSON body, or None when the resource does not exist (404).

        Network errors and 429/5xx responses are retried; once retries run out
        they surface as ProviderFailure.
        """

        @retry(reraise=True,
               retry=retry_if_exception_type((requests.RequestException, TransientHttpError)),
               stop=stop_after_attempt(self.max_retries),
               wait=wait_exponential(multiplier=self.backoff, max=30))
        def _do_request():
            self.rate_limiter.wait()
            response = self.session.get(url, timeout=self.timeout, **kwargs)
            if response.status_code == 429 or response.status_code >= 500:
                raise TransientHttpError("HTTP %s" % response.status_code)
            return response

        try:
            response = _do_request()
        except (requests.RequestException, TransientHttpError) as e:
            raise ProviderFailure(f"Failed to fetch [{url}]: {e}")
        if response.status_code == 404:
            return None
        if response.status_code >= 400:
            raise ProviderFailure("Failed to fetch [%s]: HTTP %s" % (url, response.status_code))
        try:
            return response.json()
        except ValueError as e:
            raise ProviderFailure(f"Failed to decode response from [{url}]: {e}")
