"""Model access: chat-completions transport, mock backends, prompts.

Every outward model call in the toolkit goes through :func:`chat` (or
its thin wrapper :func:`complete_insight`).  A handle bundles one
role's endpoint and decoding settings; endpoints starting with
``mock:`` are served in-process by :class:`MockBackend`, anything else
is POSTed as a chat-completions request over HTTP with retry and
backoff.

Prompt templates live as plain-text package data with ``{}``
placeholders.  Rendering is positional string substitution — not
``str.format`` — so templates may contain literal braces.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import requests

logger = logging.getLogger(__name__)

__all__ = [
    "GatewayError",
    "PromptError",
    "ChatResult",
    "CallRecord",
    "ModelHandle",
    "MockKB",
    "MockBackend",
    "HttpBackend",
    "make_handle",
    "handle_from_config",
    "chat",
    "complete_insight",
    "strip_think",
    "load_prompt",
    "load_prompt_file",
    "render_prompt",
    "slot_count",
]

ROLES = ("identifier", "miner", "generator", "extractor", "qgen", "judge")

ROLE_TEMPLATES = {
    "identifier": "identifier.txt",
    "qa": "qa.txt",
    "augmented_qa": "augmented_qa.txt",
    "matching": "matching.txt",
    "augmented_matching": "augmented_matching.txt",
    "insight_eval": "insight_eval.txt",
    "extractor": "triple_extract.txt",
    "qgen": "question_gen.txt",
}

# The miner is a continued-pretraining completion model: keep its
# output short.  Judges emit a one-line score.
_DEFAULT_MAX_TOKENS = {"miner": 100, "judge": 16, "qgen": 64}


class GatewayError(RuntimeError):
    """Raised when a model call cannot be completed."""


class PromptError(ValueError):
    """Raised for template/slot mismatches."""


@dataclass(frozen=True)
class ChatResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float
    attempts: int


@dataclass(frozen=True)
class CallRecord:
    """One outward call: what was sent, what came back, what it cost."""

    role: str
    model: str
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: float
    attempts: int


@dataclass
class ModelHandle:
    """Endpoint plus decoding settings for one pipeline role."""

    role: str
    endpoint: str = "mock:"
    model_name: str = "mock"
    temperature: float = 0.0
    max_tokens: int = 512
    strip_think_blocks: bool = False
    retry_limit: int = 2
    parallelism_cap: int = 4
    api_key_env: str = "LLM_API_KEY"
    backend: "MockBackend | HttpBackend | None" = field(
        default=None, compare=False, repr=False
    )


def make_handle(
    role: str,
    endpoint: str = "mock:",
    model_name: str = "mock",
    temperature: float = 0.0,
    max_tokens: int | None = None,
    strip_think_blocks: bool = False,
    retry_limit: int = 2,
    parallelism_cap: int = 4,
    api_key_env: str = "LLM_API_KEY",
    mock: dict | "MockBackend | None" = None,
) -> ModelHandle:
    """Build a validated handle, applying per-role decoding defaults."""
    if max_tokens is None:
        max_tokens = _DEFAULT_MAX_TOKENS.get(role, 512)
    if max_tokens <= 0:
        raise GatewayError(f"max_tokens must be positive, got {max_tokens}")
    if retry_limit < 0:
        raise GatewayError(f"retry_limit must be non-negative, got {retry_limit}")
    if parallelism_cap < 1:
        raise GatewayError(f"parallelism_cap must be at least 1, got {parallelism_cap}")
    backend: MockBackend | HttpBackend | None = None
    if isinstance(mock, MockBackend):
        backend = mock
    elif isinstance(mock, dict):
        backend = build_mock_backend(mock)
    elif endpoint.startswith("mock:"):
        backend = MockBackend(kind="empty")
    return ModelHandle(
        role=role,
        endpoint=endpoint,
        model_name=model_name,
        temperature=temperature,
        max_tokens=max_tokens,
        strip_think_blocks=strip_think_blocks,
        retry_limit=retry_limit,
        parallelism_cap=parallelism_cap,
        api_key_env=api_key_env,
        backend=backend,
    )


def handle_from_config(role: str, config: dict) -> ModelHandle:
    """Build a handle from one ``models:`` entry of a run config."""
    known = {
        "endpoint",
        "model_name",
        "temperature",
        "max_tokens",
        "strip_think_blocks",
        "retry_limit",
        "parallelism_cap",
        "api_key_env",
        "mock",
    }
    unknown = set(config) - known
    if unknown:
        raise GatewayError(f"unknown model config key(s) for {role!r}: {sorted(unknown)}")
    return make_handle(role, **config)


# --------------------------------------------------------------------------
# prompt templates


def load_prompt(name: str) -> str:
    """Load a packaged template by role/template name (e.g. ``"qa"``)."""
    try:
        filename = ROLE_TEMPLATES[name]
    except KeyError:
        raise PromptError(f"unknown prompt template {name!r}") from None
    return resources.files("insightpipe").joinpath(f"prompts/{filename}").read_text("utf-8")


def load_prompt_file(path: str | Path) -> str:
    """Load an override template from an arbitrary path."""
    return Path(path).read_text(encoding="utf-8")


def slot_count(template: str) -> int:
    return template.count("{}")


def render_prompt(template: str, *values: str) -> str:
    """Substitute ``{}`` slots positionally.

    Plain string splicing rather than ``str.format`` so that literal
    braces elsewhere in the template survive untouched.
    """
    parts = template.split("{}")
    if len(parts) - 1 != len(values):
        raise PromptError(
            f"template has {len(parts) - 1} slot(s) but {len(values)} value(s) given"
        )
    out = [parts[0]]
    for value, part in zip(values, parts[1:]):
        out.append(str(value))
        out.append(part)
    return "".join(out)


_THINK_RE = re.compile(r"<think>.*?</think>", re.DOTALL)


def strip_think(text: str) -> str:
    """Remove ``<think>...</think>`` spans from a model reply."""
    return _THINK_RE.sub("", text).strip()


def _count_tokens(text: str) -> int:
    return len(text.split())


def _truncate_words(text: str, limit: int) -> str:
    words = text.split()
    if len(words) <= limit:
        return text
    return " ".join(words[:limit])


# --------------------------------------------------------------------------
# mock backends


def _norm_key(text: str) -> str:
    return " ".join(text.casefold().split())


def _after_marker(content: str, marker: str, stops: Sequence[str] = ()) -> str | None:
    idx = content.rfind(marker)
    if idx < 0:
        return None
    tail = content[idx + len(marker):]
    for stop in stops:
        cut = tail.find(stop)
        if cut >= 0:
            tail = tail[:cut]
    return tail.strip()


def _line_value(content: str, label: str) -> str | None:
    for line in content.splitlines():
        if line.strip().casefold().startswith(label.casefold()):
            return line.split(":", 1)[1].strip() if ":" in line else ""
    return None


@dataclass
class MockKB:
    """Exact-lookup completion table for an offline insight miner.

    Keys are matched after case folding and whitespace collapsing; a
    missing fragment yields ``default``.  Values may be a string or a
    list of strings (multiple sources for the same fact).
    """

    completions: dict[str, str | list[str]] = field(default_factory=dict)
    default: str = ""

    def __post_init__(self) -> None:
        self.completions = {_norm_key(k): v for k, v in self.completions.items()}

    def lookup(self, fragment: str) -> str | list[str]:
        return self.completions.get(_norm_key(fragment), self.default)


@dataclass
class MockBackend:
    """Deterministic in-process stand-in for a chat endpoint.

    Kinds:

    ``canned``          always reply with ``text``.
    ``echo``            reply with the last user message.
    ``empty``           reply with ``default`` (by default, nothing).
    ``table``           look the reply up by a key extracted from the
                        prompt (``key_from`` picks the extractor).
    ``extract_context`` reply with everything after the last
                        ``Context:`` marker — an extractive generator.
                        Citation prompts (``Paper-A:``/``Paper-B:``) are
                        answered Yes/No by comparing ``topic<i>`` tokens.
    ``qgen_template``   deterministic question writer for
                        subject/relation prompts.
    ``qgen_invert``     parse a templated question back into its
                        fragment — an oracle insight identifier.
    ``kb``              complete a fragment from a :class:`MockKB`.

    ``drop_mod`` > 0 makes the backend an imperfect oracle: prompts whose
    md5 lands on a multiple of ``drop_mod`` get ``default`` instead, a
    deterministic failure mode for studying correctness flips.
    """

    kind: str = "empty"
    text: str = ""
    default: str = ""
    key_from: str = "last_message"
    table: dict[str, str] = field(default_factory=dict)
    kb: MockKB | None = None
    drop_mod: int = 0

    def __post_init__(self) -> None:
        valid = {
            "canned",
            "echo",
            "empty",
            "table",
            "extract_context",
            "qgen_template",
            "qgen_invert",
            "kb",
        }
        if self.kind not in valid:
            raise GatewayError(f"unknown mock kind {self.kind!r}")
        if self.kind == "table":
            self.table = {_norm_key(k): v for k, v in self.table.items()}
        if self.kind == "kb" and self.kb is None:
            self.kb = MockKB()

    # -- key extraction -----------------------------------------------------

    def _extract_key(self, content: str) -> str:
        if self.key_from == "last_message":
            return content
        if self.key_from == "task":
            found = _after_marker(content, "Task:")
            return found if found is not None else content
        if self.key_from == "question":
            found = _after_marker(content, "Question:", stops=("\nContext:",))
            return found if found is not None else content
        if self.key_from == "abstract":
            found = _after_marker(content, "Abstract:")
            return found if found is not None else content
        if self.key_from == "subject_relation":
            subject = _line_value(content, "Subject:")
            relation = _line_value(content, "Relation:")
            if subject is not None and relation is not None:
                return f"{subject} | {relation}"
            return content
        raise GatewayError(f"unknown table key extractor {self.key_from!r}")

    # -- reply construction -------------------------------------------------

    def respond(self, contents: list[str]) -> str:
        last = contents[-1] if contents else ""
        # Marker-driven kinds scan the whole conversation the way a real
        # endpoint would; a corrective follow-up must not hide the task.
        text = "\n\n".join(contents)
        if self.drop_mod > 0:
            digest = hashlib.md5(text.encode("utf-8")).digest()
            if int.from_bytes(digest[:4], "big") % self.drop_mod == 0:
                if self.kind == "extract_context" and "Paper-A:" in text and "Paper-B:" in text:
                    # Stay parseable on citation prompts: fail by
                    # answering wrongly rather than not at all.
                    return self._match_topics(text, invert=True)
                return self.default
        if self.kind == "canned":
            return self.text
        if self.kind == "echo":
            return last
        if self.kind == "empty":
            return self.default
        if self.kind == "table":
            return self.table.get(_norm_key(self._extract_key(text)), self.default)
        if self.kind == "extract_context":
            if "Paper-A:" in text and "Paper-B:" in text:
                return self._match_topics(text)
            found = _after_marker(text, "Context:")
            return found if found is not None else self.default
        if self.kind == "qgen_template":
            subject = _line_value(text, "Subject:") or "it"
            relation = _line_value(text, "Relation:") or "relates to"
            if "multiple" in text.casefold():
                return f"What are all the things {subject} {relation}?"
            return f"What does {subject} {relation}?"
        if self.kind == "qgen_invert":
            return self._invert_question(text)
        if self.kind == "kb":
            value = self.kb.lookup(last)
            if isinstance(value, list):
                value = "; ".join(value)
            return value
        raise GatewayError(f"unknown mock kind {self.kind!r}")

    @staticmethod
    def _match_topics(content: str, invert: bool = False) -> str:
        a_part = _after_marker(content, "Paper-A:", stops=("\nPaper-B:",)) or ""
        b_part = _after_marker(content, "Paper-B:", stops=("\nUseful insights:",)) or ""
        topics_a = set(re.findall(r"\btopic\d+\b", a_part))
        topics_b = set(re.findall(r"\btopic\d+\b", b_part))
        match = bool(topics_a) and topics_a == topics_b
        verdict = "Yes" if match != invert else "No"
        return json.dumps({"explanation": "topic comparison", "answer": verdict})

    @staticmethod
    def _invert_question(content: str) -> str:
        task = _after_marker(content, "Task:")
        text = task if task is not None else content
        question = next((ln.strip() for ln in text.splitlines() if ln.strip().endswith("?")), "")
        lowered = question.casefold()
        multi_prefix = "what are all the things "
        single_prefix = "what does "
        if lowered.startswith(multi_prefix):
            fragment = question[len(multi_prefix):].rstrip("?").strip()
            return json.dumps([{"Insight": fragment, "Multi-answer": True}])
        if lowered.startswith(single_prefix):
            fragment = question[len(single_prefix):].rstrip("?").strip()
            return json.dumps([{"Insight": fragment, "Multi-answer": False}])
        return "[{}]"

    def complete(
        self, handle: ModelHandle, contents: list[str], temperature: float
    ) -> tuple[str, int, int, float, int]:
        reply = _truncate_words(self.respond(contents), handle.max_tokens)
        prompt_tokens = sum(_count_tokens(c) for c in contents)
        # Mock latency is pinned to zero so replayed runs are byte-identical.
        return reply, prompt_tokens, _count_tokens(reply), 0.0, 1


def build_mock_backend(spec: dict) -> MockBackend:
    """Construct a mock backend from a config mapping.

    ``table`` kinds accept an inline ``table`` or a ``path`` to a JSON
    file; ``kb`` kinds accept an inline ``table`` or a ``triples`` path
    whose facts become ``"subject relation" -> [objects]`` completions.
    """
    spec = dict(spec)
    kind = spec.pop("kind", "empty")
    path = spec.pop("path", None)
    triples_path = spec.pop("triples", None)
    table = dict(spec.pop("table", {}))
    if path is not None:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(loaded, dict) and "table" in loaded:
            table.update(loaded.get("table", {}))
            spec.setdefault("default", loaded.get("default", ""))
            spec.setdefault("key_from", loaded.get("key_from", "last_message"))
        elif isinstance(loaded, dict):
            table.update(loaded)
        else:
            raise GatewayError(f"mock table file {path} must hold a JSON object")
    if kind == "kb":
        completions: dict[str, str | list[str]] = dict(table)
        if triples_path is not None:
            from . import triples as triples_mod  # deferred: avoids import cycle

            for triple in triples_mod.load_triples(triples_path):
                key = f"{triple.subject} {triple.relation}"
                existing = completions.setdefault(key, [])
                if isinstance(existing, list):
                    if triple.object not in existing:
                        existing.append(triple.object)
        kb = MockKB(completions=completions, default=spec.pop("default", ""))
        return MockBackend(kind="kb", kb=kb, **spec)
    return MockBackend(kind=kind, table=table, **spec)


# --------------------------------------------------------------------------
# HTTP transport


class HttpBackend:
    """Chat-completions over HTTP with retry and exponential backoff.

    Connection failures, timeouts, HTTP 429, and 5xx responses are
    retried up to the handle's ``retry_limit``; a ``Retry-After``
    header, when present, overrides the computed backoff.  Other 4xx
    responses fail immediately — they will not heal on retry.
    """

    def __init__(
        self,
        post: Callable | None = None,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 120.0,
    ) -> None:
        self._post = post if post is not None else requests.Session().post
        self._sleep = sleep
        self._timeout = timeout

    def complete(
        self, handle: ModelHandle, contents_or_messages, temperature: float
    ) -> tuple[str, int, int, float, int]:
        messages = contents_or_messages
        payload = {
            "model": handle.model_name,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": handle.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(handle.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"

        start = time.monotonic()
        last_error: Exception | None = None
        attempts = 0
        for attempt in range(handle.retry_limit + 1):
            attempts = attempt + 1
            try:
                response = self._post(
                    handle.endpoint, json=payload, headers=headers, timeout=self._timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                if attempt < handle.retry_limit:
                    self._sleep(self._backoff(attempt, None))
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = GatewayError(f"HTTP {response.status_code} from {handle.endpoint}")
                if attempt < handle.retry_limit:
                    retry_after = response.headers.get("Retry-After")
                    self._sleep(self._backoff(attempt, retry_after))
                continue
            if response.status_code != 200:
                raise GatewayError(
                    f"HTTP {response.status_code} from {handle.endpoint}: {response.text[:200]}"
                )
            try:
                data = response.json()
                text = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise GatewayError(f"malformed response from {handle.endpoint}: {exc}") from exc
            usage = data.get("usage") or {}
            prompt_tokens = int(
                usage.get("prompt_tokens", sum(_count_tokens(m["content"]) for m in messages))
            )
            completion_tokens = int(usage.get("completion_tokens", _count_tokens(text)))
            latency_ms = (time.monotonic() - start) * 1000.0
            return text, prompt_tokens, completion_tokens, latency_ms, attempts
        raise GatewayError(
            f"call to {handle.endpoint} failed after {attempts} attempt(s): {last_error}"
        )

    @staticmethod
    def _backoff(attempt: int, retry_after: str | None) -> float:
        if retry_after:
            try:
                return max(0.0, float(retry_after))
            except ValueError:
                pass
        return 0.5 * (2**attempt) + random.uniform(0.0, 0.1)


_SHARED_HTTP = HttpBackend()


# --------------------------------------------------------------------------
# calls


def _normalize_messages(messages) -> list[dict]:
    normalized = []
    for message in messages:
        if isinstance(message, dict):
            normalized.append({"role": message["role"], "content": message["content"]})
        else:
            role, content = message
            normalized.append({"role": role, "content": content})
    if not normalized:
        raise GatewayError("messages must be non-empty")
    return normalized


def chat(
    handle: ModelHandle,
    messages,
    log: list | None = None,
    temperature: float | None = None,
) -> ChatResult:
    """Send one chat turn and return the assistant reply.

    Think blocks are stripped when the handle asks for it, and exactly
    one :class:`CallRecord` is appended to ``log`` per invocation.
    """
    normalized = _normalize_messages(messages)
    effective = handle.temperature if temperature is None else temperature
    backend = handle.backend
    if backend is None:
        if handle.endpoint.startswith("mock:"):
            raise GatewayError(f"mock handle for role {handle.role!r} has no backend attached")
        backend = _SHARED_HTTP
    if isinstance(backend, MockBackend):
        contents = [m["content"] for m in normalized if m["role"] != "assistant"]
        text, ptok, ctok, latency, attempts = backend.complete(handle, contents, effective)
    else:
        text, ptok, ctok, latency, attempts = backend.complete(handle, normalized, effective)
    if handle.strip_think_blocks:
        text = strip_think(text)
    result = ChatResult(
        text=text,
        prompt_tokens=ptok,
        completion_tokens=ctok,
        latency_ms=latency,
        attempts=attempts,
    )
    if log is not None:
        user_parts = [m["content"] for m in normalized if m["role"] == "user"]
        log.append(
            CallRecord(
                role=handle.role,
                model=handle.model_name,
                prompt="\n\n".join(user_parts),
                response=text,
                prompt_tokens=ptok,
                completion_tokens=ctok,
                latency_ms=latency,
                attempts=attempts,
            )
        )
    return result


def complete_insight(
    handle: ModelHandle,
    fragment: str,
    n_samples: int = 1,
    log: list | None = None,
) -> list[str]:
    """Ask the miner to complete a sentence fragment.

    Returns ``n_samples`` completions.  Sampling temperature moves off
    zero only when more than one sample is requested; every completion
    respects the handle's token budget.
    """
    if not fragment or not fragment.strip():
        raise GatewayError("fragment must be non-empty")
    if n_samples < 1:
        raise GatewayError(f"n_samples must be at least 1, got {n_samples}")
    temperature = handle.temperature if n_samples == 1 else 0.7
    completions = []
    for _ in range(n_samples):
        result = chat(handle, [("user", fragment)], log=log, temperature=temperature)
        completions.append(result.text)
    return completions
