"""Reference-free caption scores from co-embedded caption text and images.

Every score is 100 times the cosine between a text vector and an image vector
taken from the same embedding family. The PAC variant is clipped at zero and
optionally rescaled. Encoders live behind the provider interface.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BuildscopeError, ConfigError, DomainError, FixtureMissError, ParseError
from .transport import HttpClient, HttpRequest

SPACES = ("clip", "blip", "pac")
MODALITIES = ("text", "image")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    space_id: str

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise DomainError("embedding vector is empty")
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("embedding vector has non-finite values")

    def __len__(self):
        return len(self.values)


def _normalized(values: Sequence[float]) -> tuple[list[float], float]:
    """Rescale by the largest magnitude so squares neither overflow nor underflow."""
    peak = max(abs(v) for v in values)
    if peak == 0.0:
        raise DomainError("cosine is undefined for a zero vector")
    return [v / peak for v in values], peak


def similarity_score(t: EmbeddingVector, i: EmbeddingVector) -> float:
    """100 * cos(t, i), with compensated sums, clamped to [-100, 100]."""
    if t.space_id != i.space_id:
        raise DomainError(f"space mismatch: {t.space_id} vs {i.space_id}")
    if len(t) != len(i):
        raise DomainError(f"dimension mismatch: {len(t)} vs {len(i)}")
    a, _ = _normalized(t.values)
    b, _ = _normalized(i.values)
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    return max(-100.0, min(100.0, 100.0 * dot / (na * nb)))


def pac_score(t: EmbeddingVector, i: EmbeddingVector, scale: float = 1.0) -> float:
    if not scale > 0:
        raise DomainError("PAC scale must be positive")
    return max(0.0, similarity_score(t, i)) * scale


@dataclass(frozen=True)
class ScoreTriplet:
    caption_id: str
    asset_id: str
    clip_pct: float | None
    blip_pct: float | None
    pac_pct: float | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {"caption_id": self.caption_id, "asset_id": self.asset_id,
                "clip_pct": self.clip_pct, "blip_pct": self.blip_pct, "pac_pct": self.pac_pct,
                "error": self.error}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreTriplet":
        return cls(doc["caption_id"], doc["asset_id"], doc["clip_pct"], doc["blip_pct"],
                   doc["pac_pct"], doc.get("error"))


def caption_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# providers


class EmbeddingProvider(Protocol):
    kind: str
    space_id: str

    def embed_text(self, text: str) -> EmbeddingVector: ...

    def embed_image(self, asset_id: str) -> EmbeddingVector: ...


class _Memo:
    """Per-instance memo so repeated inputs return the identical vector."""

    def __init__(self):
        self._memo: dict[tuple[str, str], EmbeddingVector] = {}
        self._lock = threading.Lock()
        self.computed = 0

    def get_or(self, key, compute):
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        vec = compute()
        with self._lock:
            self.computed += 1
            return self._memo.setdefault(key, vec)


class HashEmbeddingProvider:
    """Deterministic unit vectors seeded from a hash of the input.

    Every vector is ``shared * base + sqrt(1 - shared**2) * noise`` where the
    base direction is common to the whole space, so text/image cosines
    cluster around ``shared**2`` like a real encoder's typical scores.
    """

    kind = "deterministic-hash-mock"

    def __init__(self, space_id: str, dim: int = 512, shared: float = 0.55, salt: str = ""):
        if dim < 1:
            raise ConfigError("embedding dimension must be positive")
        if not 0.0 <= shared < 1.0:
            raise ConfigError("shared weight must lie in [0, 1)")
        self.space_id = space_id
        self.dim = dim
        self.shared = shared
        self.salt = salt
        self._base = self._unit(f"base|{space_id}|{salt}")
        self._memo = _Memo()

    def _unit(self, label: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "big")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def _vector(self, modality: str, value: str) -> EmbeddingVector:
        def compute():
            noise = self._unit(f"{modality}|{self.space_id}|{self.salt}|{value}")
            v = self.shared * self._base + math.sqrt(1.0 - self.shared ** 2) * noise
            return EmbeddingVector(tuple((v / np.linalg.norm(v)).tolist()), self.space_id)

        return self._memo.get_or((modality, value), compute)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._vector("text", text)

    def embed_image(self, asset_id: str) -> EmbeddingVector:
        return self._vector("image", asset_id)


class FixtureEmbeddingProvider:
    """Precomputed vectors: ``{"vectors": {key: {space_id: [...]}}}``.

    Text is looked up by the sha256 of the caption text, images by asset id.
    """

    kind = "fixture-file"

    def __init__(self, source, space_id: str):
        if isinstance(source, dict):
            doc = source
        else:
            try:
                doc = json.loads(Path(source).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read embedding fixture {source}: {exc}") from exc
        self.vectors = doc.get("vectors", {})
        self.space_id = space_id
        dims = {len(v[space_id]) for v in self.vectors.values() if space_id in v}
        if len(dims) > 1:
            raise ConfigError(f"fixture vectors in {space_id} have mixed lengths {sorted(dims)}")

    def _lookup(self, key: str) -> EmbeddingVector:
        try:
            return EmbeddingVector(tuple(self.vectors[key][self.space_id]), self.space_id)
        except KeyError:
            raise FixtureMissError(key, self.space_id) from None

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._lookup(caption_key(text))

    def embed_image(self, asset_id: str) -> EmbeddingVector:
        return self._lookup(asset_id)


class RemoteEmbeddingProvider:
    """Embedding service reached over HTTP.

    Request: ``POST {endpoint}`` with ``{"model", "space", "input": [item]}``
    where an item is ``{"type": "text", "text": ...}`` or
    ``{"type": "image", "media_type": ..., "data": <base64>}``.
    Response: ``{"data": [{"embedding": [...]}]}``. Pass an HttpClient with a
    cache to make repeated inputs free across runs.
    """

    kind = "remote-endpoint"

    def __init__(self, http: HttpClient, endpoint: str, space_id: str, model: str = "",
                 api_key: str = "", resolve_asset=None):
        self.http = http
        self.endpoint = endpoint
        self.space_id = space_id
        self.model = model or space_id
        self._api_key = api_key
        self.resolve_asset = resolve_asset
        self._memo = _Memo()

    def __repr__(self):
        return f"RemoteEmbeddingProvider({self.endpoint!r}, {self.space_id!r})"

    def _post(self, item: dict) -> EmbeddingVector:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        req = HttpRequest.post_json(self.endpoint, {"model": self.model, "space": self.space_id,
                                                    "input": [item]}, headers)
        resp = self.http.fetch(req)
        try:
            values = resp.json()["data"][0]["embedding"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ParseError("embedding response has no data[0].embedding", resp.text()[:200]) from exc
        return EmbeddingVector(tuple(values), self.space_id)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._memo.get_or(("text", text), lambda: self._post({"type": "text", "text": text}))

    def embed_image(self, asset_id: str) -> EmbeddingVector:
        if self.resolve_asset is None:
            raise ConfigError("remote image embedding needs an asset resolver")

        def compute():
            data, media = self.resolve_asset(asset_id)
            return self._post({"type": "image", "media_type": media,
                               "data": base64.b64encode(data).decode()})

        return self._memo.get_or(("image", asset_id), compute)


def embed(provider: EmbeddingProvider, value: str, modality: str = "text") -> EmbeddingVector:
    """Embed caption text or an image (by asset id) with ``provider``."""
    if modality == "text":
        return provider.embed_text(value)
    if modality == "image":
        return provider.embed_image(value)
    raise DomainError(f"modality must be one of {MODALITIES}")


def mock_embedding_providers() -> dict[str, HashEmbeddingProvider]:
    return {"clip": HashEmbeddingProvider("clip", 512, 0.55),
            "blip": HashEmbeddingProvider("blip", 256, 0.45),
            "pac": HashEmbeddingProvider("pac", 512, 0.6)}


# ---------------------------------------------------------------------------


def score_caption(caption, images, providers: dict[str, EmbeddingProvider],
                  pac_scale: float = 1.0, max_workers: int = 4) -> list[ScoreTriplet]:
    """One triplet per image, in image order.

    The caption is embedded once per space. An image whose embedding fails
    gets a triplet with no scores and the error text; the rest are scored.
    """
    missing = [s for s in SPACES if s not in providers]
    if missing:
        raise ConfigError(f"no embedding provider for {missing}")
    for s in SPACES:
        if providers[s].space_id != s:
            raise ConfigError(f"provider for {s} produces {providers[s].space_id} vectors")
    images = list(images)
    if not images:
        return []
    text = caption.text if hasattr(caption, "text") else str(caption)
    cid = caption_key(text)
    t_vec = {s: providers[s].embed_text(text) for s in SPACES}

    def one(image) -> ScoreTriplet:
        asset_id = getattr(image, "asset_id", image)
        try:
            i_vec = {s: providers[s].embed_image(asset_id) for s in SPACES}
            return ScoreTriplet(cid, asset_id,
                                similarity_score(t_vec["clip"], i_vec["clip"]),
                                similarity_score(t_vec["blip"], i_vec["blip"]),
                                pac_score(t_vec["pac"], i_vec["pac"], pac_scale))
        except BuildscopeError as exc:
            return ScoreTriplet(cid, asset_id, None, None, None, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(images)))) as pool:
        return list(pool.map(one, images))
