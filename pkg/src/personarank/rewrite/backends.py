"""LLM backends and the retrying client that drives them.

A backend is anything with ``complete(request) -> BackendResponse``. The
:class:`LLMClient` adds the retry budget, exponential backoff, response
validation and a transcript of every call.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, TypeVar

from ..errors import BackendError, ParseError
from .prompts import TemplateId

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_TOKEN_ENV = "PERSONARANK_API_TOKEN"


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 256
    template: str = ""
    fields: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class BackendResponse:
    text: str
    backend_tag: str


class Backend(Protocol):
    def complete(self, request: BackendRequest) -> BackendResponse: ...


class MockBackend:
    """Deterministic rule-based backend: accepts every rewrite on the first check."""

    tag = "mock"

    def complete(self, request: BackendRequest) -> BackendResponse:
        return BackendResponse(self.respond(request), self.tag)

    def respond(self, request: BackendRequest) -> str:
        f = request.fields
        template = request.template
        if template == TemplateId.A_INTENT:
            return f"INTENT: {f.get('query', '')}"
        if template == TemplateId.C_CHECK:
            return "1 1"
        if template == TemplateId.JUDGE:
            return "5 5"
        return f"as {f.get('agent', 'someone')}: {f.get('query', '')}"


class ScriptedBackend(MockBackend):
    """Replays canned responses per template, for hermetic tests.

    ``script`` maps a template id to a response or a list of responses
    consumed in order; the last one repeats once the list runs out. An
    ``Exception`` instance in the list is raised instead of returned.
    Templates absent from the script fall back to :class:`MockBackend`.
    Every request is kept in ``requests``.
    """

    tag = "scripted"

    def __init__(self, script: Mapping[str, str | Exception | Iterable[str | Exception]] | None = None):
        self._script: dict[str, list] = {}
        for key, value in (script or {}).items():
            items = [value] if isinstance(value, (str, Exception)) else list(value)
            self._script[TemplateId(key).value] = items
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        self.requests: list[BackendRequest] = []

    def complete(self, request: BackendRequest) -> BackendResponse:
        with self._lock:
            self.requests.append(request)
            items = self._script.get(request.template)
            if not items:
                return BackendResponse(self.respond(request), self.tag)
            i = self._cursor.get(request.template, 0)
            self._cursor[request.template] = i + 1
            item = items[min(i, len(items) - 1)]
        if isinstance(item, Exception):
            raise item
        return BackendResponse(item, self.tag)

    def templates_used(self) -> list[str]:
        return [r.template for r in self.requests]


class HttpBackend:
    """OpenAI-compatible chat-completions endpoint.

    The bearer token is read from the environment variable named by
    ``token_env`` at call time and never stored or logged.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        token_env: str = DEFAULT_TOKEN_ENV,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.token_env = token_env
        self.timeout = timeout
        self.tag = f"http:{model}"

    def complete(self, request: BackendRequest) -> BackendResponse:
        body = json.dumps(
            {
                "model": self.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise BackendError(f"HTTP backend call failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise BackendError(f"HTTP backend returned invalid JSON: {exc.msg}") from exc
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendError("HTTP backend response has no choices[0].message.content") from None
        return BackendResponse(str(text), self.tag)


class Transcript:
    """Thread-safe audit log of backend calls.

    Entries are keyed by ``(qid, role_index, seq)`` where ``seq`` counts
    calls within one pipeline, so the sorted log does not depend on how
    concurrent pipelines interleave.
    """

    def __init__(self) -> None:
        self._entries: list[dict] = []
        self._seq: dict[tuple[str, int], itertools.count] = {}
        self._lock = threading.Lock()

    def add(self, qid: str, role: int, entry: dict) -> None:
        with self._lock:
            counter = self._seq.setdefault((qid, role), itertools.count())
            self._entries.append({"qid": qid, "role": role, "seq": next(counter), **entry})

    def entries(self) -> list[dict]:
        with self._lock:
            return sorted(self._entries, key=lambda e: (e["qid"], e["role"], e["seq"]))

    def __len__(self) -> int:
        return len(self._entries)


class LLMClient:
    """Wraps a backend with a retry budget and transcript.

    ``attempts`` is the total number of calls allowed per request; a
    transport failure, an empty response or a parse failure each use one.
    """

    def __init__(
        self,
        backend: Backend,
        attempts: int = 3,
        backoff: float = 0.5,
        temperature: float = 0.0,
        max_tokens: int = 256,
        transcript: Transcript | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.backend = backend
        self.attempts = attempts
        self.backoff = backoff
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.transcript = transcript if transcript is not None else Transcript()
        self._sleep = sleep

    def ask(
        self,
        template: TemplateId | str,
        prompt: str,
        fields: Mapping[str, str],
        parse: Callable[[str], T],
        qid: str = "",
        role: int = 0,
    ) -> T:
        name = template.value if isinstance(template, TemplateId) else str(template)
        request = BackendRequest(prompt, self.temperature, self.max_tokens, name, dict(fields))
        last: Exception | None = None
        for attempt in range(1, self.attempts + 1):
            entry = {"template": request.template, "attempt": attempt, "prompt": prompt}
            try:
                response = self.backend.complete(request)
            except BackendError as exc:
                last = exc
                self.transcript.add(qid, role, {**entry, "response": None, "error": str(exc)})
            else:
                entry.update(response=response.text, backend=response.backend_tag)
                try:
                    if not response.text.strip():
                        raise ParseError("empty response")
                    value = parse(response.text)
                except ParseError as exc:
                    last = exc
                    self.transcript.add(qid, role, {**entry, "error": str(exc)})
                else:
                    self.transcript.add(qid, role, {**entry, "error": None})
                    return value
            logger.debug("attempt %d/%d for %s failed: %s", attempt, self.attempts, name, last)
            if attempt < self.attempts and self.backoff > 0:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        if isinstance(last, ParseError):
            raise ParseError(f"{name}: {last} after {self.attempts} attempt(s) (qid={qid})")
        raise BackendError(f"{name}: {last} after {self.attempts} attempt(s)", qid=qid)


def as_client(backend_or_client: Backend | LLMClient) -> LLMClient:
    if isinstance(backend_or_client, LLMClient):
        return backend_or_client
    return LLMClient(backend_or_client, backoff=0.0)
