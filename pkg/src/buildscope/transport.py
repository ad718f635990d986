"""HTTP plumbing: canonical requests, retrying client, response cache, cassettes.

A *transport* is any callable ``send(HttpRequest) -> HttpResponse``. The live
transport talks to the network through ``requests``; cassette transports
record or replay exchanges so the rest of the package can be exercised
offline. :class:`HttpClient` layers retry, rate limiting and the
content-addressed response cache on top of a transport.
"""
from __future__ import annotations

import base64
import difflib
import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol
from urllib.parse import quote, urlencode, urlsplit

from .errors import ReplayMissError, TransportError

log = logging.getLogger(__name__)

#: Query parameters and headers that carry credentials. They are sent on the
#: wire but never enter signatures, caches or cassettes.
SECRET_PARAMS = frozenset({"key", "api_key", "apikey", "access_token", "token"})
SECRET_HEADERS = frozenset({"authorization", "x-api-key", "x-goog-api-key", "api-key"})

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})

CASSETTE_VERSION = 1


def _encode_query(pairs) -> str:
    return urlencode(list(pairs), quote_via=quote, safe=",:|")


@dataclass(frozen=True)
class HttpRequest:
    method: str
    url: str
    params: tuple[tuple[str, str], ...] = ()
    body: bytes | None = None
    headers: tuple[tuple[str, str], ...] = ()

    @classmethod
    def get(cls, url, params=None, headers=None):
        return cls("GET", url, tuple((str(k), str(v)) for k, v in (params or {}).items()),
                   None, tuple((headers or {}).items()))

    @classmethod
    def post_json(cls, url, document, headers=None):
        body = json.dumps(document, sort_keys=True, separators=(",", ":")).encode()
        hdrs = {"Content-Type": "application/json", **(headers or {})}
        return cls("POST", url, (), body, tuple(hdrs.items()))

    @property
    def host(self) -> str:
        return urlsplit(self.url).netloc

    def public_params(self):
        return sorted((k.lower(), v) for k, v in self.params if k.lower() not in SECRET_PARAMS)

    def canonical(self) -> str:
        """Key-stripped canonical form: sorted, lowercased query keys."""
        out = f"{self.method.upper()} {self.url}"
        query = _encode_query(self.public_params())
        if query:
            out += "?" + query
        if self.body:
            out += " body-sha256=" + hashlib.sha256(self.body).hexdigest()
        return out

    def canonical_url(self) -> str:
        query = _encode_query(self.public_params())
        return f"{self.url}?{query}" if query else self.url

    @property
    def signature(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def wire_url(self) -> str:
        query = _encode_query(self.params)
        return f"{self.url}?{query}" if query else self.url


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: bytes
    content_type: str = "application/octet-stream"

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def json(self):
        return json.loads(self.body.decode("utf-8"))

    def text(self) -> str:
        return self.body.decode("utf-8", errors="replace")


class Transport(Protocol):
    def __call__(self, request: HttpRequest) -> HttpResponse: ...


class TransportFailure(Exception):
    """Raised by transports for connection-level failures (always retryable)."""


class RequestsTransport:
    """Live transport backed by a ``requests`` session."""

    def __init__(self, timeout: float = 30.0, session=None):
        import requests

        self._requests = requests
        self.session = session or requests.Session()
        self.timeout = timeout

    def __call__(self, request: HttpRequest) -> HttpResponse:
        try:
            resp = self.session.request(
                request.method, request.wire_url(), data=request.body,
                headers=dict(request.headers), timeout=self.timeout)
        except (self._requests.Timeout, self._requests.ConnectionError) as exc:
            raise TransportFailure(f"{type(exc).__name__} for {request.canonical()}") from exc
        ctype = resp.headers.get("Content-Type", "application/octet-stream").split(";")[0].strip()
        return HttpResponse(resp.status_code, resp.content, ctype)


# --------------------------------------------------------------------------
# response cache


class ResponseCache:
    """Successful responses keyed by request signature.

    With ``root=None`` the cache lives in memory; otherwise each entry is a
    JSON file under ``root``. Writes are atomic, so identical concurrent
    writes are harmless.
    """

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, HttpResponse] = {}
        self._lock = threading.Lock()

    def _path(self, signature: str) -> Path:
        return self.root / signature[:2] / f"{signature}.json"

    def get(self, signature: str) -> HttpResponse | None:
        with self._lock:
            if signature in self._mem:
                return self._mem[signature]
        if self.root is None:
            return None
        path = self._path(signature)
        if not path.exists():
            return None
        doc = json.loads(path.read_text())
        resp = HttpResponse(doc["status"], base64.b64decode(doc["body_base64"]), doc["content_type"])
        with self._lock:
            self._mem[signature] = resp
        return resp

    def put(self, signature: str, response: HttpResponse):
        with self._lock:
            self._mem[signature] = response
        if self.root is None:
            return
        doc = {
            "status": response.status,
            "content_type": response.content_type,
            "body_base64": base64.b64encode(response.body).decode(),
        }
        _atomic_write(self._path(signature), json.dumps(doc, sort_keys=True).encode())

    def __contains__(self, signature):
        return self.get(signature) is not None


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# retry + rate limiting


@dataclass(frozen=True)
class RetryPolicy:
    attempts: int = 3
    base_delay: float = 0.25
    jitter: float = 0.25

    def delay(self, attempt: int, rng=random) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        base = self.base_delay * (2 ** (attempt - 1))
        return base * (1.0 + rng.uniform(0.0, self.jitter))


class HostRateLimiter:
    """Bounds the number of in-flight requests per host."""

    def __init__(self, max_in_flight: int = 4):
        self.max_in_flight = max_in_flight
        self._sems: dict[str, threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()

    def slot(self, host: str) -> threading.BoundedSemaphore:
        with self._lock:
            if host not in self._sems:
                self._sems[host] = threading.BoundedSemaphore(self.max_in_flight)
            return self._sems[host]


@dataclass
class RequestLogEntry:
    signature: str
    canonical: str
    started: float
    finished: float
    status: int | None
    attempts: int
    from_cache: bool


class HttpClient:
    """Retrying, caching front end over a transport."""

    def __init__(self, transport: Transport, *, retry: RetryPolicy | None = None,
                 cache: ResponseCache | None = None, limiter: HostRateLimiter | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.transport = transport
        self.retry = retry or RetryPolicy()
        self.cache = cache
        self.limiter = limiter or HostRateLimiter()
        self.sleep = sleep
        self.log: list[RequestLogEntry] = []
        self._log_lock = threading.Lock()

    @property
    def issued(self) -> list[RequestLogEntry]:
        """Entries that reached the transport (cache hits excluded)."""
        return [e for e in self.log if not e.from_cache]

    def _record(self, entry: RequestLogEntry):
        with self._log_lock:
            self.log.append(entry)

    def fetch(self, request: HttpRequest) -> HttpResponse:
        sig = request.signature
        started = time.monotonic()
        if self.cache is not None:
            hit = self.cache.get(sig)
            if hit is not None:
                self._record(RequestLogEntry(sig, request.canonical(), started, time.monotonic(),
                                             hit.status, 0, True))
                return hit

        last_error = ""
        status = None
        for attempt in range(1, self.retry.attempts + 1):
            try:
                with self.limiter.slot(request.host):
                    resp = self.transport(request)
            except TransportFailure as exc:
                last_error, status = str(exc), None
            else:
                status = resp.status
                if resp.ok:
                    if self.cache is not None:
                        self.cache.put(sig, resp)
                    self._record(RequestLogEntry(sig, request.canonical(), started,
                                                 time.monotonic(), status, attempt, False))
                    return resp
                last_error = f"HTTP {resp.status}: {resp.text()[:200]}"
                if resp.status not in RETRYABLE_STATUSES:
                    self._record(RequestLogEntry(sig, request.canonical(), started,
                                                 time.monotonic(), status, attempt, False))
                    raise TransportError(f"{request.canonical()} failed with {last_error}",
                                         status=status, attempts=attempt)
            if attempt < self.retry.attempts:
                delay = self.retry.delay(attempt)
                log.debug("retrying %s in %.3fs after %s", request.canonical(), delay, last_error)
                self.sleep(delay)

        self._record(RequestLogEntry(sig, request.canonical(), started, time.monotonic(),
                                     status, self.retry.attempts, False))
        raise TransportError(
            f"{request.canonical()} failed after {self.retry.attempts} attempts: {last_error}",
            status=status, attempts=self.retry.attempts)


# --------------------------------------------------------------------------
# cassettes


_TEXT_TYPES = ("application/json", "text/")


@dataclass
class CassetteEntry:
    signature: str
    request: str
    status: int
    content_type: str
    body: bytes
    recorded_at: str

    def to_dict(self) -> dict:
        doc = {
            "signature": self.signature,
            "request": self.request,
            "status": self.status,
            "content_type": self.content_type,
            "recorded_at": self.recorded_at,
        }
        if self.content_type.startswith(_TEXT_TYPES):
            doc["body_text"] = self.body.decode("utf-8")
        else:
            doc["body_base64"] = base64.b64encode(self.body).decode()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CassetteEntry":
        if "body_text" in doc:
            body = doc["body_text"].encode("utf-8")
        else:
            body = base64.b64decode(doc["body_base64"])
        return cls(doc["signature"], doc["request"], doc["status"], doc["content_type"],
                   body, doc["recorded_at"])

    def response(self) -> HttpResponse:
        return HttpResponse(self.status, self.body, self.content_type)


@dataclass
class Cassette:
    entries: list[CassetteEntry] = field(default_factory=list)

    def __post_init__(self):
        sigs = [e.signature for e in self.entries]
        if len(sigs) != len(set(sigs)):
            raise ValueError("duplicate request signatures in cassette")

    @classmethod
    def load(cls, path) -> "Cassette":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CASSETTE_VERSION:
            raise ValueError(f"unsupported cassette version {doc.get('version')!r} in {path}")
        return cls([CassetteEntry.from_dict(e) for e in doc["entries"]])

    def dumps(self) -> str:
        doc = {"version": CASSETTE_VERSION, "entries": [e.to_dict() for e in self.entries]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path):
        _atomic_write(Path(path), self.dumps().encode())

    def add(self, request: HttpRequest, response: HttpResponse, recorded_at: str | None = None):
        sig = request.signature
        entry = CassetteEntry(sig, request.canonical(), response.status, response.content_type,
                              response.body,
                              recorded_at or datetime.now(timezone.utc).isoformat(timespec="seconds"))
        for k, old in enumerate(self.entries):
            if old.signature == sig:
                self.entries[k] = entry
                return
        self.entries.append(entry)

    def by_signature(self) -> dict[str, CassetteEntry]:
        return {e.signature: e for e in self.entries}


class CassetteRecorder:
    """Forwards to ``inner`` and records every exchange into a cassette."""

    def __init__(self, inner: Transport, path, cassette: Cassette | None = None):
        self.inner = inner
        self.path = Path(path)
        self.cassette = cassette or Cassette()
        self._lock = threading.Lock()

    def __call__(self, request: HttpRequest) -> HttpResponse:
        resp = self.inner(request)
        with self._lock:
            self.cassette.add(request, resp)
        return resp

    def save(self):
        with self._lock:
            self.cassette.save(self.path)


class CassetteReplayer:
    """Serves recorded responses keyed by signature; never touches the network."""

    def __init__(self, source):
        if isinstance(source, Cassette):
            self.cassette = source
        else:
            path = Path(source)
            if not path.exists():
                raise ReplayMissError("", "", message=f"replay requested but cassette {path} does not exist")
            self.cassette = Cassette.load(path)
        self._index = self.cassette.by_signature()
        self.replayed: list[str] = []
        self._lock = threading.Lock()

    def __call__(self, request: HttpRequest) -> HttpResponse:
        sig = request.signature
        entry = self._index.get(sig)
        if entry is None:
            canon = request.canonical()
            known = [e.request for e in self.cassette.entries]
            close = difflib.get_close_matches(canon, known, n=1, cutoff=0.0)
            raise ReplayMissError(sig, canon, close[0] if close else None)
        with self._lock:
            self.replayed.append(sig)
        return entry.response()
