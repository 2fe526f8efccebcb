"""HTTP client for chat-completion and embedding endpoints, plus role adapters.

Request bodies (``POST {endpoint}/chat/completions``)::

    {"model": <model>, "messages": [{"role": "user", "content": <prompt>}],
     "temperature": 0}

and the reply is read from ``choices[0].message.content``. Embeddings go to
``POST {endpoint}/embeddings`` with ``{"model": <model>, "input": [...]}``
and are read from ``data[i].embedding`` in input order.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Callable, Sequence

import httpx
import numpy as np

from ..consolidation import Rerun
from ..context import ContextString, StepAnchor
from ..errors import (
    AuthMissing,
    BadResponse,
    DimensionMismatch,
    ExecutorUnavailable,
    RemoteTimeout,
    RetriesExhausted,
)
from ..graph import DEFAULT_DIMENSION, l2_normalize
from ..refinement import Feedback, Granularity

log = logging.getLogger(__name__)

ROLES = ("verifier", "reshaper", "inductor", "rewriter", "executor")
BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0
DEBUG_ENV = "FLUXMEM_DEBUG_HTTP"


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str
    model: str
    auth_env: str = "FLUXMEM_API_KEY"
    timeout_ms: int = 30_000
    max_retries: int = 3
    # Role name -> template path; missing roles use the packaged defaults.
    prompts: dict[str, str] = field(default_factory=dict)
    embedding_model: str | None = None
    dimension: int = DEFAULT_DIMENSION
    max_in_flight: int = 4
    debug_log: str = "fluxmem-http.jsonl"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RemoteConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)


def load_template(role: str, config: RemoteConfig) -> Template:
    if role in config.prompts:
        return Template(Path(config.prompts[role]).read_text(encoding="utf-8"))
    if role not in ROLES:
        raise KeyError(f"no prompt template for role {role!r}")
    text = resources.files("fluxmem.prompts").joinpath(f"{role}.txt").read_text(encoding="utf-8")
    return Template(text)


def _debug(config: RemoteConfig, entry: dict) -> None:
    if os.environ.get(DEBUG_ENV) != "1":
        return
    with open(config.debug_log, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


class HttpTransport:
    """Retrying JSON poster shared by the completion and embedding calls.

    One transport caps its own in-flight requests, so role adapters that
    should share the cap share the transport.
    """

    def __init__(
        self,
        config: RemoteConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.client = client or httpx.Client()
        self.sleep = sleep
        self.backoffs: list[float] = []
        self._in_flight = threading.BoundedSemaphore(config.max_in_flight)

    def post(self, path: str, body: dict) -> dict:
        token = os.environ.get(self.config.auth_env)
        if not token:
            raise AuthMissing(f"environment variable {self.config.auth_env} is not set")
        url = self.config.endpoint.rstrip("/") + path
        headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}
        timeout = self.config.timeout_ms / 1000.0
        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                wait = BACKOFF_BASE_S * BACKOFF_FACTOR ** (attempt - 1)
                self.backoffs.append(wait)
                self.sleep(wait)
            try:
                with self._in_flight:
                    resp = self.client.post(url, json=body, headers=headers, timeout=timeout)
            except httpx.TimeoutException as exc:
                last_error = f"timeout: {exc}"
                _debug(self.config, {"url": url, "attempt": attempt, "error": last_error})
                if attempt == self.config.max_retries:
                    raise RemoteTimeout(last_error) from None
                continue
            except httpx.TransportError as exc:
                last_error = f"transport: {exc}"
                _debug(self.config, {"url": url, "attempt": attempt, "error": last_error})
                continue
            _debug(
                self.config,
                {
                    "url": url,
                    "attempt": attempt,
                    "headers": {**headers, "Authorization": "Bearer [redacted]"},
                    "request": body,
                    "status": resp.status_code,
                    "response": resp.text,
                },
            )
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BadResponse(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError:
                raise BadResponse("response is not JSON") from None
        raise RetriesExhausted(f"{self.config.max_retries + 1} attempt(s) failed; last: {last_error}")


def remote_complete(
    role: str, payload: str, config: RemoteConfig, transport: HttpTransport | None = None
) -> str:
    transport = transport or HttpTransport(config)
    prompt = load_template(role, config).safe_substitute(payload=payload)
    body = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    }
    data = transport.post("/chat/completions", body)
    try:
        text = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise BadResponse("no choices in completion response") from None
    if not isinstance(text, str):
        raise BadResponse("completion content is not text")
    return text


def remote_embed(
    texts: Sequence[str], config: RemoteConfig, transport: HttpTransport | None = None
) -> list[np.ndarray]:
    if not texts:
        return []
    transport = transport or HttpTransport(config)
    body = {"model": config.embedding_model or config.model, "input": list(texts)}
    data = transport.post("/embeddings", body)
    try:
        rows = sorted(data["data"], key=lambda r: r.get("index", 0))
        vectors = [np.asarray(r["embedding"], dtype=np.float64) for r in rows]
    except (KeyError, TypeError, ValueError):
        raise BadResponse("malformed embeddings response") from None
    if len(vectors) != len(texts):
        raise BadResponse(f"asked for {len(texts)} embeddings, got {len(vectors)}")
    for vec in vectors:
        if vec.ndim != 1 or vec.shape[0] != config.dimension:
            raise DimensionMismatch(
                f"service returned {vec.shape[-1] if vec.ndim else 0} dims, graph uses {config.dimension}"
            )
    return [l2_normalize(v) for v in vectors]


# --- role adapters -------------------------------------------------------------


class _RemoteRole:
    deterministic = False

    def __init__(self, config: RemoteConfig, transport: HttpTransport | None = None):
        self.config = config
        self.transport = transport or HttpTransport(config)

    def _ask(self, role: str, payload) -> str:
        if not isinstance(payload, str):
            payload = json.dumps(payload, sort_keys=True)
        return remote_complete(role, payload, self.config, self.transport).strip()


class RemoteEmbedder(_RemoteRole):
    def __call__(self, text: str) -> np.ndarray:
        return remote_embed([text], self.config, self.transport)[0]


class RemoteVerifier(_RemoteRole):
    def __call__(self, candidate: str, observation: str) -> int:
        reply = self._ask("verifier", {"candidate": candidate, "observation": observation})
        head = reply.split()[0].lower().strip(".,:") if reply.split() else ""
        if head in {"1", "yes", "true"}:
            return 1
        if head in {"0", "no", "false"}:
            return 0
        raise BadResponse(f"verifier reply is not a yes/no: {reply[:60]!r}")


class RemoteReshaper(_RemoteRole):
    def __call__(self, content: str, direction: Granularity) -> str:
        reply = self._ask("reshaper", {"content": content, "direction": Granularity(direction).value})
        if not reply:
            raise BadResponse("reshaper returned empty content")
        return reply


class RemoteInductor(_RemoteRole):
    def induce(self, texts: Sequence[str]) -> str:
        return self._ask("inductor", {"episodes": list(texts)})

    def rewrite(self, skill: str, reruns: Sequence[Rerun]) -> str:
        runs = [{"episode": r.member, "success": r.success, "context": r.context.text} for r in reruns]
        return self._ask("rewriter", {"skill": skill, "reruns": runs}) or skill


class RemoteExecutor(_RemoteRole):
    """Executor whose reply must be a Feedback JSON object."""

    def __call__(self, anchor: StepAnchor, context: ContextString) -> Feedback:
        reply = self._ask("executor", context.text)
        try:
            return Feedback.from_dict(json.loads(reply))
        except (ValueError, KeyError, TypeError) as exc:
            raise ExecutorUnavailable(f"unparseable executor reply: {exc}") from None
