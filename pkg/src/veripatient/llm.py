"""Chat-completion access for the four agent roles.

Backends speak the common chat-completions wire format over HTTP, or replay
a script for offline tests. :func:`complete` adds bounded retries with
exponential backoff and a JSON-lines audit trail.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "VERIPATIENT_LLM_API_KEY"
CHARS_PER_TOKEN = 4


class Role(str, Enum):
    PATIENT_GENERATOR = "patient_generator"
    DOCTOR = "doctor"
    VERIFIER = "verifier"
    JUDGE = "judge"


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad chat role {self.role!r}")
        if self.role != "system" and not self.content.strip():
            raise ValueError(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class GenerationParams:
    temperature: float
    top_p: float = 0.95
    max_input_tokens: int = 4096
    max_output_tokens: int = 256
    frequency_penalty: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside 0..2")


ROLE_PRESETS: dict[Role, GenerationParams] = {
    Role.PATIENT_GENERATOR: GenerationParams(temperature=0.7),
    Role.DOCTOR: GenerationParams(temperature=0.3),
    Role.VERIFIER: GenerationParams(temperature=0.0),
    Role.JUDGE: GenerationParams(temperature=0.0),
}


# --- templates ----------------------------------------------------------------

TEMPLATE_IDS = ("patient", "verifier", "doctor", "judge")
_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")


class TemplateError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


def load_template(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise ValueError(f"unknown template {template_id!r}")
    return resources.files("veripatient").joinpath(f"templates/{template_id}.txt").read_text("utf-8")


def placeholders(template_id: str) -> set[str]:
    return set(_PLACEHOLDER.findall(load_template(template_id)))


def render_template(template_id: str, variables: Mapping[str, str]) -> str:
    """Substitute every ``{{name}}`` placeholder in one pass.

    Substituted values are not rescanned, so a value that itself contains
    braces is inserted literally.
    """
    text = load_template(template_id)
    needed = set(_PLACEHOLDER.findall(text))
    missing = sorted(needed - set(variables))
    if missing:
        raise TemplateError(f"unbound placeholder: {missing[0]}")
    extra = sorted(set(variables) - needed)
    if extra:
        logger.warning("template %s ignoring unused variables: %s", template_id, ", ".join(extra))
    return _PLACEHOLDER.sub(lambda m: str(variables[m.group(1)]), text)


# --- backends -----------------------------------------------------------------

class LLMError(RuntimeError):
    pass


class TransientError(LLMError):
    """Retryable failure: connection problems, 429, 5xx."""


class LLMTransportError(LLMError):
    """Retries exhausted."""


class BackendError(LLMError):
    """Non-retryable error response; ``body`` keeps what the server said."""

    def __init__(self, status: int, body: str):
        super().__init__(f"backend returned HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class Backend(Protocol):
    name: str

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 seed: int | None = None) -> str: ...


class HTTPBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        name: str | None = None,
    ):
        self.model = model
        self.name = name or model
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def request_body(self, messages: Sequence[ChatMessage], params: GenerationParams,
                     seed: int | None = None) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [m.to_dict() for m in messages],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
            "frequency_penalty": params.frequency_penalty,
        }
        if seed is not None:
            body["seed"] = seed
        return body

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 seed: int | None = None) -> str:
        try:
            resp = self._http.post("/chat/completions", json=self.request_body(messages, params, seed))
        except httpx.TransportError as exc:
            raise TransientError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if not resp.is_success:
            raise BackendError(resp.status_code, resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(resp.status_code, resp.text) from exc


ScriptItem = Any  # str | Exception | {"error": "transient" | "backend", ...}


class ReplayBackend:
    """Scripted backend; hands out responses in request order.

    Either a ``script`` list (optionally cycled) or a ``responder`` callable
    mapping the message list to a reply. Every request is kept in
    ``requests`` so tests can inspect the exact prompts sent.
    """

    def __init__(
        self,
        script: Sequence[ScriptItem] | None = None,
        responder: Callable[[Sequence[ChatMessage]], ScriptItem] | None = None,
        cycle: bool = False,
        name: str = "replay",
    ):
        if (script is None) == (responder is None):
            raise ValueError("give exactly one of script or responder")
        self.script = list(script or [])
        self.responder = responder
        self.cycle = cycle
        self.name = name
        self.requests: list[tuple[tuple[ChatMessage, ...], GenerationParams, int | None]] = []
        self._cursor = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams,
                 seed: int | None = None) -> str:
        with self._lock:
            self.requests.append((tuple(messages), params, seed))
            if self.responder is not None:
                item = self.responder(messages)
            else:
                if self._cursor >= len(self.script):
                    if not self.cycle or not self.script:
                        raise LLMError(f"replay script {self.name!r} exhausted after {self._cursor} replies")
                item = self.script[self._cursor % len(self.script)]
                self._cursor += 1
        if isinstance(item, Exception):
            raise item
        if isinstance(item, dict) and "error" in item:
            if item["error"] == "transient":
                raise TransientError(item.get("message", "scripted transient failure"))
            raise BackendError(int(item.get("status", 400)), item.get("message", "scripted backend error"))
        return str(item)

    @property
    def prompts(self) -> list[str]:
        """Concatenated message text of every request, in order."""
        return ["\n".join(m.content for m in msgs) for msgs, _, _ in self.requests]


# --- completion with retries ------------------------------------------------

_audit_lock = threading.Lock()


def fit_messages(messages: Sequence[ChatMessage], max_input_tokens: int) -> list[ChatMessage]:
    """Drop the oldest non-system history until the prompt fits the budget.

    The budget is approximated at four characters per token. System messages
    and the final message are always kept.
    """
    budget = max_input_tokens * CHARS_PER_TOKEN
    kept = list(messages)
    size = sum(len(m.content) for m in kept)
    i = 0
    while size > budget and i < len(kept) - 1:
        if kept[i].role == "system":
            i += 1
            continue
        size -= len(kept.pop(i).content)
    return kept


def _audit(path: Path | None, record: dict) -> None:
    if path is None:
        return
    line = json.dumps(record, sort_keys=True, ensure_ascii=False)
    with _audit_lock, open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def complete(
    backend: Backend,
    messages: Sequence[ChatMessage],
    params: GenerationParams,
    *,
    retries: int = 2,
    backoff: float = 0.5,
    seed: int | None = None,
    sleep: Callable[[float], None] = time.sleep,
    audit_log: Path | None = None,
    role: str = "",
) -> str:
    """Send one chat request, retrying transient failures.

    Makes at most ``retries + 1`` attempts, sleeping ``backoff * 2**n``
    between them. Raises :class:`LLMTransportError` once attempts run out;
    :class:`BackendError` passes straight through.
    """
    if not messages:
        raise ValueError("complete() needs at least one message")
    messages = fit_messages(messages, params.max_input_tokens)
    correlation_id = uuid.uuid4().hex
    last: Exception | None = None
    for attempt in range(retries + 1):
        started = time.perf_counter()
        try:
            text = backend.complete(messages, params, seed)
        except TransientError as exc:
            last = exc
            logger.info("[%s] %s attempt %d/%d failed: %s", correlation_id, backend.name,
                        attempt + 1, retries + 1, exc)
            _audit(audit_log, {"id": correlation_id, "role": role, "backend": backend.name,
                               "attempt": attempt + 1, "error": str(exc)})
            if attempt < retries:
                sleep(backoff * 2**attempt)
            continue
        _audit(audit_log, {
            "id": correlation_id,
            "role": role,
            "backend": backend.name,
            "attempt": attempt + 1,
            "at": datetime.now(timezone.utc).isoformat(),
            "elapsed_s": round(time.perf_counter() - started, 4),
            "request": [m.to_dict() for m in messages],
            "temperature": params.temperature,
            "response": text,
        })
        return text
    raise LLMTransportError(f"{backend.name}: {retries + 1} attempts failed; last error: {last}")


@dataclass
class Gateway:
    """Role-addressed access to backends with the role's generation params."""

    backends: dict[Role, Backend]
    params: dict[Role, GenerationParams] = field(default_factory=lambda: dict(ROLE_PRESETS))
    retries: int = 2
    backoff: float = 0.5
    seed: int | None = None
    audit_log: Path | None = None
    sleep: Callable[[float], None] = time.sleep
    calls: dict[Role, int] = field(default_factory=dict)

    def complete(self, role: Role, messages: Sequence[ChatMessage]) -> str:
        role = Role(role)
        if role not in self.backends:
            raise LLMError(f"no backend configured for role {role.value}")
        self.calls[role] = self.calls.get(role, 0) + 1
        return complete(
            self.backends[role],
            messages,
            self.params[role],
            retries=self.retries,
            backoff=self.backoff,
            seed=self.seed,
            sleep=self.sleep,
            audit_log=self.audit_log,
            role=role.value,
        )


# --- endpoint configuration ---------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    """One entry of the run-config ``endpoints``/``doctors`` maps.

    ``kind="http"`` needs ``base_url`` and ``model``. ``kind="replay"`` takes a
    ``script`` list, replayed from the start for every conversation, with
    optional per-case overrides in ``per_case``.
    """

    kind: str = "http"
    base_url: str = ""
    model: str = ""
    api_key_env: str = API_KEY_ENV
    script: tuple = ()
    cycle: bool = False
    per_case: Mapping[str, tuple] = field(default_factory=dict)
    size: str = ""
    type: str = ""

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EndpointConfig:
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown endpoint fields: {sorted(unknown)}")
        kind = data.get("kind", "http")
        if kind == "http" and not (data.get("base_url") and data.get("model")):
            raise ValueError("http endpoint needs base_url and model")
        if kind == "replay" and not data.get("script"):
            raise ValueError("replay endpoint needs a non-empty script")
        if kind not in ("http", "replay"):
            raise ValueError(f"unknown endpoint kind {kind!r}")
        return cls(
            kind=kind,
            base_url=data.get("base_url", ""),
            model=data.get("model", ""),
            api_key_env=data.get("api_key_env", API_KEY_ENV),
            script=tuple(data.get("script", ())),
            cycle=bool(data.get("cycle", False)),
            per_case={k: tuple(v) for k, v in data.get("per_case", {}).items()},
            size=str(data.get("size", "")),
            type=str(data.get("type", "")),
        )

    def make(self, case_id: str = "", name: str = "") -> Backend:
        if self.kind == "replay":
            script = self.per_case.get(case_id, self.script)
            return ReplayBackend(script=list(script), cycle=self.cycle, name=name or "replay")
        return HTTPBackend(self.base_url, self.model, self.api_key_env, name=name or self.model)
