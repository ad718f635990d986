"""Chat-completion providers.

A provider takes a chat-completions request document and returns the
completion document. The HTTP adapter speaks the wire format shared by the
OpenAI and DeepSeek platforms; the mocks answer deterministically so the
whole pipeline runs offline.
"""
from __future__ import annotations

import base64
import copy
import hashlib
import json
import os
import re
import threading
from typing import Callable, Protocol

from ..errors import ConfigError, ParseError, TransportError
from ..transport import HttpClient, HttpRequest, RequestsTransport
from .messages import ASSET_SCHEME

OPENAI_BASE_URL = "https://api.openai.com/v1"
DEEPSEEK_BASE_URL = "https://api.deepseek.com"


class ChatProvider(Protocol):
    def complete(self, request: dict) -> dict: ...


def completion_document(model: str, text: str, prompt_tokens: int, completion_tokens: int,
                        cached_tokens: int = 0) -> dict:
    return {
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "finish_reason": "stop",
                     "message": {"role": "assistant", "content": text}}],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens,
            "prompt_tokens_details": {"cached_tokens": cached_tokens},
        },
    }


def parse_completion(doc) -> tuple[str, dict]:
    """Return ``(reply_text, usage)`` where usage has input/cached/output counts."""
    raw = json.dumps(doc)[:300] if not isinstance(doc, str) else doc[:300]
    try:
        text = doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ParseError("completion document has no message content", raw) from exc
    if not isinstance(text, str):
        raise ParseError("completion content is not text", raw)
    u = doc.get("usage") or {}
    prompt = int(u.get("prompt_tokens", 0))
    cached = int(u.get("prompt_cache_hit_tokens",
                       (u.get("prompt_tokens_details") or {}).get("cached_tokens", 0)) or 0)
    usage = {
        "input_tokens": max(prompt - cached, 0),
        "cached_input_tokens": cached,
        "output_tokens": int(u.get("completion_tokens", 0)),
    }
    return text, usage


# ---------------------------------------------------------------------------
# HTTP adapter


class OpenAICompatibleProvider:
    """POSTs to ``{base_url}/chat/completions`` with a bearer token.

    ``asset://`` image references are inlined as base64 data URLs using
    ``resolve_asset(asset_id) -> (bytes, media_type)``.
    """

    def __init__(self, base_url: str, api_key: str, http: HttpClient,
                 resolve_asset: Callable[[str], tuple[bytes, str]] | None = None):
        if not api_key:
            raise ConfigError(f"no API key configured for {base_url}")
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self.http = http
        self.resolve_asset = resolve_asset

    def __repr__(self):
        return f"OpenAICompatibleProvider({self.base_url!r})"

    def _inline_images(self, request: dict) -> dict:
        out = copy.deepcopy(request)
        for msg in out["messages"]:
            if isinstance(msg.get("content"), list):
                for part in msg["content"]:
                    url = part.get("image_url", {}).get("url", "")
                    if url.startswith(ASSET_SCHEME):
                        if self.resolve_asset is None:
                            raise ConfigError("image parts need an asset resolver")
                        data, media = self.resolve_asset(url[len(ASSET_SCHEME):])
                        part["image_url"]["url"] = (
                            f"data:{media};base64,{base64.b64encode(data).decode()}")
        return out

    def complete(self, request: dict) -> dict:
        req = HttpRequest.post_json(f"{self.base_url}/chat/completions", self._inline_images(request),
                                    {"Authorization": f"Bearer {self._api_key}"})
        resp = self.http.fetch(req)
        try:
            return resp.json()
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError("completion response is not JSON", resp.text()[:300]) from exc


def provider_endpoint(model_id: str) -> tuple[str, str]:
    """(base_url, api-key env var) for a model id."""
    if model_id.startswith("deepseek"):
        return os.environ.get("DEEPSEEK_BASE_URL", DEEPSEEK_BASE_URL), "DEEPSEEK_API_KEY"
    return os.environ.get("OPENAI_BASE_URL", OPENAI_BASE_URL), "OPENAI_API_KEY"


def live_provider_factory(resolve_asset=None, retry=None, limiter=None):
    """Factory building a dedicated HTTP client per agent from env credentials."""
    from ..transport import HostRateLimiter

    limiter = limiter or HostRateLimiter()

    def make(model_id: str) -> ChatProvider:
        base, key_var = provider_endpoint(model_id)
        http = HttpClient(RequestsTransport(timeout=120.0), retry=retry, limiter=limiter)
        return OpenAICompatibleProvider(base, os.environ.get(key_var, ""), http, resolve_asset)

    return make


# ---------------------------------------------------------------------------
# deterministic mocks


def _word_count(text: str) -> int:
    return len(text.split())


def _message_text(msg: dict) -> str:
    content = msg.get("content")
    if isinstance(content, str):
        return content
    return "\n".join(c.get("text", "") for c in content if c.get("type") == "text")


def _image_urls(msg: dict) -> list[tuple[str, str]]:
    content = msg.get("content")
    if isinstance(content, str):
        return []
    return [(c["image_url"]["url"], c["image_url"].get("detail", "high"))
            for c in content if c.get("type") == "image_url"]


def mock_usage(request: dict, reply: str) -> tuple[int, int]:
    """Deterministic token counts: words, plus a flat charge per image."""
    prompt = 0
    for m in request["messages"]:
        prompt += _word_count(_message_text(m)) + 1
        prompt += sum(765 if d == "high" else 85 for _, d in _image_urls(m))
    return prompt, _word_count(reply)


class _RecordingProvider:
    """Base for mocks: keeps a deep copy of every request received."""

    def __init__(self, journal: list | None = None):
        self.requests: list[dict] = []
        self.journal = journal
        self._lock = threading.Lock()

    def _capture(self, request: dict):
        snap = copy.deepcopy(request)
        with self._lock:
            self.requests.append(snap)
            if self.journal is not None:
                self.journal.append(snap)

    def complete(self, request: dict) -> dict:
        self._capture(request)
        reply = self.reply(request)
        p, c = mock_usage(request, reply)
        return completion_document(request.get("model", "mock"), reply, p, c)

    def reply(self, request: dict) -> str:
        raise NotImplementedError


class EchoProvider(_RecordingProvider):
    """Replies with the text of the last user message."""

    def reply(self, request):
        return _message_text(request["messages"][-1])


class ScriptedProvider(_RecordingProvider):
    """Replies from a fixed script (cycled) or a callable of the request."""

    def __init__(self, script, journal=None, usage: tuple[int, int] | None = None):
        super().__init__(journal)
        self.script = script
        self.usage = usage
        self._n = 0

    def reply(self, request):
        if callable(self.script):
            return self.script(request)
        with self._lock:
            text = self.script[self._n % len(self.script)]
            self._n += 1
        return text

    def complete(self, request):
        doc = super().complete(request)
        if self.usage is not None:
            doc["usage"] = completion_document("", "", *self.usage)["usage"]
        return doc


class FailingProvider(_RecordingProvider):
    """Delegates to ``inner`` but raises TransportError when ``should_fail(request)``."""

    def __init__(self, inner: ChatProvider, should_fail: Callable[[dict], bool], journal=None):
        super().__init__(journal)
        self.inner = inner
        self.should_fail = should_fail

    def complete(self, request):
        self._capture(request)
        if self.should_fail(request):
            raise TransportError("injected provider failure")
        return self.inner.complete(request)


VOCABULARY = (
    "glass", "steel", "concrete", "brick", "stone", "timber", "facade", "curtain wall",
    "atrium", "courtyard", "flat roof", "green roof", "solar panels", "skylight", "tower",
    "low-rise", "high-rise", "modern", "gothic", "brutalist", "rectangular", "angular",
    "cantilever", "balconies", "parking lot", "trees", "street", "plaza", "entrance canopy",
    "reflective windows", "columns", "institutional", "residential", "commercial", "retail",
    "river", "park", "pedestrian path", "rooftop equipment", "landscaping",
)

_KEYWORD_BLOCK = re.compile(r"^Keywords:\s*$", re.MULTILINE)


class MockChatProvider(_RecordingProvider):
    """Deterministic stand-in for a captioning LLM.

    * a user message carrying images gets 6-9 keywords chosen by hashing the
      image references;
    * a prompt with a ``Keywords:`` block gets either the block's keywords
      back (deduplicated) or, when the instruction asks for a caption, a
      sentence built from them;
    * anything else is echoed.
    """

    def reply(self, request):
        last = request["messages"][-1]
        images = _image_urls(last)
        if images:
            seed = hashlib.sha256("|".join(u for u, _ in images).encode()).digest()
            n = 6 + seed[0] % 4
            picks = []
            for k in range(n):
                word = VOCABULARY[seed[1 + k] % len(VOCABULARY)]
                if word not in picks:
                    picks.append(word)
            return ", ".join(picks)
        text = _message_text(last)
        m = _KEYWORD_BLOCK.search(text)
        if not m:
            return text
        instruction, block = text[:m.start()], text[m.end():]
        words = []
        for w in re.split(r"[,;\n]", block):
            w = w.strip().lower()
            if w and w not in words:
                words.append(w)
        if "caption" in instruction.lower():
            if not words:
                return "A building."
            # each model picks its own subset so mock runs differ per model
            seed = hashlib.sha256(f"{request.get('model')}|{block}".encode()).digest()
            shift = seed[0] % len(words)
            words = words[shift:] + words[:shift]
            head, rest = words[0], words[1:2 + seed[1] % 5]
            if not rest:
                return f"A {head} building."
            listed = ", ".join(rest[:-1]) + (" and " if len(rest) > 1 else "") + rest[-1]
            return f"A {head} building featuring {listed}."
        return ", ".join(words)


def mock_provider_factory(kind: str = "mock", journal: list | None = None):
    classes = {"mock": MockChatProvider, "echo": EchoProvider}
    if kind not in classes:
        raise ConfigError(f"unknown mock provider {kind!r}")

    def make(model_id: str) -> ChatProvider:
        return classes[kind](journal)

    return make
