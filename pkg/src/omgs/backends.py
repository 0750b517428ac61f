"""Agent backends.

Every model call in the system goes through one wire shape::

    request  = {role, instruction, context, schema_id}
    response = {message, usage: {prompt_tokens, completion_tokens, wall_ms}}

Backends here:

- ``ScriptedBackend``: replays a file mapping request fingerprint -> response.
- ``FunctionBackend``: wraps a Python callable (deterministic policies, tests).
- ``RecordingBackend``: wraps another backend and captures a replay file.
- ``HttpBackend``: POSTs the request to a remote ``/generate`` endpoint.
"""

from __future__ import annotations

import json
import os
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import httpx

from .canonical import canonical_bytes, content_hash

CREDENTIAL_ENV = "OMGS_BACKEND_TOKEN"


class BackendError(RuntimeError):
    """A backend could not produce a response."""

    def __init__(self, message: str, *, retryable: bool = False) -> None:
        super().__init__(message)
        self.retryable = retryable


class MissingReplayError(BackendError):
    """Scripted backend has no response recorded for a request fingerprint."""

    def __init__(self, fingerprint: str, role: str, schema_id: str) -> None:
        super().__init__(
            f"no scripted response for {role}/{schema_id} (fingerprint {fingerprint[:16]})"
        )
        self.fingerprint = fingerprint


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_ms: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, int]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "wall_ms": self.wall_ms,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Usage:
        try:
            return cls(
                int(data["prompt_tokens"]),
                int(data["completion_tokens"]),
                int(data["wall_ms"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"usage record incomplete: {data!r}") from exc


@dataclass(frozen=True)
class GenerationRequest:
    role: str
    instruction: str
    context: Mapping[str, Any]
    schema_id: str

    def to_wire(self) -> dict[str, Any]:
        return {
            "role": self.role,
            "instruction": self.instruction,
            "context": self.context,
            "schema_id": self.schema_id,
        }

    @classmethod
    def from_wire(cls, data: Mapping[str, Any]) -> GenerationRequest:
        return cls(data["role"], data["instruction"], data.get("context", {}), data["schema_id"])

    def fingerprint(self) -> str:
        return content_hash(self.to_wire())


@dataclass(frozen=True)
class GenerationResult:
    message: Any
    usage: Usage


@runtime_checkable
class AgentBackend(Protocol):
    backend_id: str

    def generate(self, request: GenerationRequest) -> GenerationResult: ...


def estimate_usage(request: GenerationRequest, message: Any) -> Usage:
    """Deterministic token estimate (~4 bytes per token) for offline backends."""
    prompt = len(canonical_bytes(request.to_wire()))
    completion = len(canonical_bytes(message))
    return Usage(prompt_tokens=(prompt + 3) // 4, completion_tokens=(completion + 3) // 4)


class ScriptedBackend:
    """Replays recorded responses keyed by request fingerprint.

    Every request seen is appended to ``requests`` so tests can inspect what
    each role was shown.
    """

    def __init__(self, responses: Mapping[str, Mapping[str, Any]], backend_id: str = "scripted"):
        self._responses = dict(responses)
        self.backend_id = backend_id
        self.requests: list[GenerationRequest] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> ScriptedBackend:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["responses"], backend_id=data.get("backend_id", f"scripted:{Path(path).name}"))

    def generate(self, request: GenerationRequest) -> GenerationResult:
        self.requests.append(request)
        fp = request.fingerprint()
        entry = self._responses.get(fp)
        if entry is None:
            raise MissingReplayError(fp, request.role, request.schema_id)
        return GenerationResult(entry["message"], Usage.from_dict(entry["usage"]))


class FunctionBackend:
    """Backend driven by ``fn(request) -> message`` or ``(message, Usage)``."""

    def __init__(self, fn: Callable[[GenerationRequest], Any], backend_id: str = "function"):
        self._fn = fn
        self.backend_id = backend_id
        self.requests: list[GenerationRequest] = []

    def generate(self, request: GenerationRequest) -> GenerationResult:
        self.requests.append(request)
        out = self._fn(request)
        if isinstance(out, tuple) and len(out) == 2 and isinstance(out[1], Usage):
            return GenerationResult(out[0], out[1])
        return GenerationResult(out, estimate_usage(request, out))


@dataclass
class RecordingBackend:
    """Pass-through backend that captures a replay file for ``ScriptedBackend``."""

    inner: AgentBackend
    backend_id: str = "scripted"
    recorded: dict[str, dict[str, Any]] = field(default_factory=dict)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        result = self.inner.generate(request)
        self.recorded[request.fingerprint()] = {
            "role": request.role,
            "schema_id": request.schema_id,
            "message": result.message,
            "usage": result.usage.to_dict(),
        }
        return result

    def replay_document(self) -> dict[str, Any]:
        return {"backend_id": self.backend_id, "responses": dict(sorted(self.recorded.items()))}

    def save(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(
            json.dumps(self.replay_document(), indent=1, sort_keys=True, ensure_ascii=False),
            encoding="utf-8",
        )


class HttpBackend:
    """Client for a remote agent server exposing ``POST {base_url}/generate``.

    The bearer token is read from ``OMGS_BACKEND_TOKEN`` when present.
    """

    def __init__(
        self,
        base_url: str,
        *,
        timeout: float = 300.0,
        client: httpx.Client | None = None,
        token_env: str = CREDENTIAL_ENV,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.backend_id = f"http:{self.base_url}"
        headers = {}
        token = os.environ.get(token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._headers = headers
        self._client = client or httpx.Client(timeout=timeout)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        started = time.monotonic()
        try:
            resp = self._client.post(
                f"{self.base_url}/generate", json=request.to_wire(), headers=self._headers
            )
        except httpx.HTTPError as exc:
            raise BackendError(f"transport failure: {exc}", retryable=True) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise BackendError(f"server returned {resp.status_code}", retryable=True)
        if resp.status_code != 200:
            raise BackendError(f"server returned {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            message = body["message"]
            usage_raw = dict(body["usage"])
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError("response missing message/usage") from exc
        usage_raw.setdefault("wall_ms", int((time.monotonic() - started) * 1000))
        return GenerationResult(message, Usage.from_dict(usage_raw))


def backend_from_spec(spec: str) -> AgentBackend:
    """Parse ``scripted:<file>`` or ``http:<url>`` as used by the CLI."""
    kind, _, target = spec.partition(":")
    if kind == "scripted" and target:
        return ScriptedBackend.from_file(target)
    if kind == "http" and target:
        return HttpBackend(target)
    raise ValueError(f"unrecognised backend spec {spec!r}; expected scripted:<file> or http:<url>")
