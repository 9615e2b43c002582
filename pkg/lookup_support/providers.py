#!/usr/bin/env python3
"""Metadata providers, described by a small table rather than one class per service.

Format is one provider per line:

    kind provider_id credential auth url_template

kind is one of [author, gender]

credential is the environment variable holding the API key, with a trailing
'?' when the key is optional, or '-' when the service takes none.

auth says where the key goes:
  query:<param>   appended as a query parameter
  header:<name>   sent as a request header
  -               not sent

url_template uses {isbn} for author lookups and {name} for gender lookups.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable

from components.config import env_credential
from components.errors import ConfigError, ProviderFailure
from lookup_support.http_client import HttpClient

_logger = logging.getLogger(__name__)

PROVIDER_TABLE = """
author google_books GOOGLE_BOOKS_API_KEY? query:key https://www.googleapis.com/books/v1/volumes?q=isbn:{isbn}
author isbndb ISBNDB_API_KEY header:Authorization https://api2.isbndb.com/book/{isbn}
author open_library - - https://openlibrary.org/api/books?bibkeys=ISBN:{isbn}&format=json&jscmd=data
gender genderize GENDERIZE_API_KEY? query:apikey https://api.genderize.io?name={name}
"""


@dataclass(frozen=True)
class ProviderSpec:
    kind: str
    provider_id: str
    credential_env: str | None
    credential_required: bool
    auth: str | None
    url_template: str


def parse_provider_table(text: str) -> dict[str, ProviderSpec]:
    specs = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ConfigError("Provider table line %s needs 5 fields, got [%s]" % (line_no, line))
        kind, provider_id, credential, auth, url_template = fields
        if kind not in ("author", "gender"):
            raise ConfigError("Provider table line %s has unknown kind [%s]" % (line_no, kind))
        if auth != "-" and not auth.startswith(("query:", "header:")):
            raise ConfigError("Provider table line %s has unknown auth [%s]" % (line_no, auth))
        required = credential != "-" and not credential.endswith("?")
        specs[provider_id] = ProviderSpec(kind=kind,
                                          provider_id=provider_id,
                                          credential_env=None if credential == "-" else credential.rstrip("?"),
                                          credential_required=required,
                                          auth=None if auth == "-" else auth,
                                          url_template=url_template)
    return specs


PROVIDERS = parse_provider_table(PROVIDER_TABLE)


def _google_books(data, isbn):
    for item in data.get("items") or []:
        authors = item.get("volumeInfo", {}).get("authors")
        if authors:
            return list(authors)
    return []


def _isbndb(data, isbn):
    return list(data.get("book", {}).get("authors") or [])


def _open_library(data, isbn):
    entry = data.get("ISBN:%s" % isbn) or {}
    return [a["name"] for a in entry.get("authors") or [] if a.get("name")]


def _genderize(data, name):
    return data.get("gender"), float(data.get("probability") or 0.0)


EXTRACTORS: dict[str, Callable[[Any, str], Any]] = {
    "google_books": _google_books,
    "isbndb": _isbndb,
    "open_library": _open_library,
    "genderize": _genderize,
}


class HttpProvider:
    """One table entry bound to an HttpClient and its credential.

    ``lookup`` returns the extracted value, an empty result for a clean miss,
    and raises ProviderFailure when the service could not answer.
    """

    def __init__(self, spec: ProviderSpec, client: HttpClient, credential: str | None = None,
                 extractor: Callable[[Any, str], Any] | None = None):
        self.spec = spec
        self.provider_id = spec.provider_id
        self.client = client
        self.credential = credential
        self.extractor = extractor or EXTRACTORS[spec.provider_id]

    def _request_options(self):
        if not self.credential or self.spec.auth is None:
            return {}
        where, name = self.spec.auth.split(":", 1)
        if where == "query":
            return {"params": {name: self.credential}}
        return {"headers": {name: self.credential}}

    def lookup(self, key: str):
        url = self.spec.url_template.format(isbn=key, name=key)
        data = self.client.get_json(url, **self._request_options())
        if data is None:
            return [] if self.spec.kind == "author" else (None, 0.0)
        try:
            return self.extractor(data, key)
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise ProviderFailure(f"Failed to read [{self.provider_id}] response for [{key}]: {e}")


def build_provider(provider_id: str, *, session=None, rps=1.0, timeout=10.0, max_retries=3) -> HttpProvider | None:
    """Provider from the table, or None (with a warning) when its required key is missing."""
    try:
        spec = PROVIDERS[provider_id]
    except KeyError:
        raise ConfigError("Unknown provider [%s]; known: %s" % (provider_id, ", ".join(sorted(PROVIDERS))))
    credential = env_credential(spec.credential_env) if spec.credential_env else None
    if spec.credential_required and credential is None:
        _logger.warning("Skipping provider [%s]: environment variable [%s] is not set",
                        provider_id, spec.credential_env)
        return None
    client = HttpClient(timeout=timeout, max_retries=max_retries, rps=rps, session=session)
    return HttpProvider(spec, client, credential)
