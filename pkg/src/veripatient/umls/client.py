"""Terminology service clients.

Every client answers ``fetch(endpoint, query)`` with the raw JSON payload the
UTS REST API would return, so a live session can be recorded once and
replayed forever after without credentials.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Any

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "VERIPATIENT_UMLS_API_KEY"
DEFAULT_BASE_URL = "https://uts-ws.nlm.nih.gov/rest"
SNAPSHOT_FILE = "_snapshot.json"

ENDPOINTS = ("search_exact", "search_words", "atoms", "relations")

DEFAULT_PATHS = {
    "search_exact": "/search/current",
    "search_words": "/search/current",
    "atoms": "/content/current/CUI/{query}/atoms",
    "relations": "/content/current/source/SNOMEDCT_US/{query}/relations",
}


class TerminologyError(RuntimeError):
    pass


class TransportError(TerminologyError):
    """The service could not be reached after retries."""


class FixtureMissing(TerminologyError):
    pass


def fixture_name(endpoint: str, query: str) -> str:
    slug = re.sub(r"[^0-9A-Za-z]+", "_", query.strip().lower()).strip("_") or "_"
    return f"{endpoint}/{slug}.json"


class TerminologyClient:
    """Abstract client. Subclasses implement :meth:`fetch`."""

    snapshot_id: str = "unknown"
    recorded_at: str | None = None

    def fetch(self, endpoint: str, query: str) -> Any:
        raise NotImplementedError

    # Convenience wrappers over the UTS payload shapes.

    def search(self, term: str, search_type: str = "exact") -> list[dict]:
        payload = self.fetch(f"search_{search_type}", term)
        results = (payload or {}).get("result", {}).get("results", [])
        return [r for r in results if r.get("ui") and r.get("ui") != "NONE"]

    def atoms(self, cui: str) -> list[dict]:
        return list((self.fetch("atoms", cui) or {}).get("result", []))

    def relations(self, snomed_id: str) -> list[dict]:
        return list((self.fetch("relations", snomed_id) or {}).get("result", []))


class LiveClient(TerminologyClient):
    """UTS REST client with bounded retries on transient failures."""

    def __init__(
        self,
        api_key: str | None = None,
        base_url: str = DEFAULT_BASE_URL,
        paths: dict[str, str] | None = None,
        page_size: int = 200,
        retries: int = 3,
        backoff: float = 0.5,
        transport: httpx.BaseTransport | None = None,
        snapshot_id: str = "current",
    ):
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise TerminologyError(f"live terminology access needs ${API_KEY_ENV}")
        self.paths = {**DEFAULT_PATHS, **(paths or {})}
        self.page_size = page_size
        self.retries = retries
        self.backoff = backoff
        self.snapshot_id = snapshot_id
        self._http = httpx.Client(base_url=base_url, timeout=30.0, transport=transport)

    def _params(self, endpoint: str, query: str) -> dict[str, Any]:
        params: dict[str, Any] = {"apiKey": self.api_key, "pageSize": self.page_size}
        if endpoint.startswith("search_"):
            params["string"] = query
            params["searchType"] = endpoint.removeprefix("search_")
        elif endpoint == "atoms":
            params["language"] = "ENG"
        return params

    def fetch(self, endpoint: str, query: str) -> Any:
        if endpoint not in self.paths:
            raise TerminologyError(f"unknown endpoint {endpoint!r}")
        url = self.paths[endpoint].format(query=query)
        params = self._params(endpoint, query)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._http.get(url, params=params)
            except httpx.TransportError as exc:
                last = exc
            else:
                if resp.status_code == 404:
                    return {"result": {"results": []}} if endpoint.startswith("search_") else {"result": []}
                if resp.is_success:
                    return resp.json()
                if resp.status_code < 500 and resp.status_code != 429:
                    raise TerminologyError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                last = TerminologyError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if attempt < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise TransportError(f"{endpoint} {query!r} failed after {self.retries + 1} attempts: {last}")

    def close(self) -> None:
        self._http.close()


class ReplayClient(TerminologyClient):
    """Serves recorded payloads from ``<fixtures>/<endpoint>/<slug>.json``."""

    def __init__(self, fixtures_dir: str | Path):
        self.root = Path(fixtures_dir)
        meta_path = self.root / SNAPSHOT_FILE
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            self.snapshot_id = meta.get("snapshot_id", "unknown")
            self.recorded_at = meta.get("recorded_at")

    def fetch(self, endpoint: str, query: str) -> Any:
        path = self.root / fixture_name(endpoint, query)
        if not path.exists():
            raise FixtureMissing(f"no recorded fixture {path}")
        return json.loads(path.read_text(encoding="utf-8"))


class RecordingClient(TerminologyClient):
    """Wraps a live client and writes each response as a replay fixture."""

    def __init__(self, inner: TerminologyClient, fixtures_dir: str | Path, recorded_at: str):
        self.inner = inner
        self.root = Path(fixtures_dir)
        self.snapshot_id = inner.snapshot_id
        self.recorded_at = recorded_at
        self._lock = threading.Lock()
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / SNAPSHOT_FILE).write_text(
            json.dumps({"snapshot_id": self.snapshot_id, "recorded_at": recorded_at}, indent=2) + "\n",
            encoding="utf-8",
        )

    def fetch(self, endpoint: str, query: str) -> Any:
        payload = self.inner.fetch(endpoint, query)
        path = self.root / fixture_name(endpoint, query)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return payload


class CountingClient(TerminologyClient):
    """Test/diagnostic wrapper that tallies calls per (endpoint, query)."""

    def __init__(self, inner: TerminologyClient):
        self.inner = inner
        self.snapshot_id = inner.snapshot_id
        self.recorded_at = inner.recorded_at
        self.calls: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def fetch(self, endpoint: str, query: str) -> Any:
        with self._lock:
            self.calls[(endpoint, query)] = self.calls.get((endpoint, query), 0) + 1
        return self.inner.fetch(endpoint, query)
