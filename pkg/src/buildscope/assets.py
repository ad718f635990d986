"""Content-addressed image store.

Bytes live at ``<root>/objects/<aa>/<sha256>.<ext>``; ``<root>/manifest.json``
maps each asset id to its media metadata and every acquisition it was stored
under. Identical bytes always resolve to the same asset id.
"""
from __future__ import annotations

import hashlib
import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from PIL import Image, UnidentifiedImageError

from .errors import ParseError
from .transport import _atomic_write

ASSET_KINDS = ("oblique_orbit", "satellite", "street_map")

_FORMAT_MEDIA = {
    "PNG": ("image/png", "png"),
    "JPEG": ("image/jpeg", "jpg"),
    "GIF": ("image/gif", "gif"),
    "WEBP": ("image/webp", "webp"),
    "BMP": ("image/bmp", "bmp"),
    "TIFF": ("image/tiff", "tif"),
}


def sniff_image(data: bytes) -> tuple[str, str, int, int]:
    """Return ``(media_type, extension, width, height)`` or raise ParseError."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.verify()
        with Image.open(io.BytesIO(data)) as im:
            fmt, (w, h) = im.format, im.size
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ParseError("body is not a readable image", data[:64].decode("latin-1")) from exc
    media, ext = _FORMAT_MEDIA.get(fmt, (f"image/{(fmt or 'unknown').lower()}", (fmt or "bin").lower()))
    return media, ext, w, h


@dataclass(frozen=True)
class ImageAsset:
    asset_id: str
    kind: str
    acquisition: Any
    width_px: int
    height_px: int
    media_type: str
    storage_path: str

    def __post_init__(self):
        if self.kind not in ASSET_KINDS:
            raise ValueError(f"unknown asset kind {self.kind!r}")
        from .maps import StaticMapRequest
        from .orbit import CameraPose

        want = CameraPose if self.kind == "oblique_orbit" else StaticMapRequest
        if not isinstance(self.acquisition, want):
            raise ValueError(f"{self.kind} asset needs a {want.__name__} acquisition")

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id,
            "kind": self.kind,
            "acquisition": self.acquisition.to_dict(),
            "width_px": self.width_px,
            "height_px": self.height_px,
            "media_type": self.media_type,
            "storage_path": self.storage_path,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ImageAsset":
        from .maps import StaticMapRequest
        from .orbit import CameraPose

        acq_type = CameraPose if doc["kind"] == "oblique_orbit" else StaticMapRequest
        return cls(doc["asset_id"], doc["kind"], acq_type.from_dict(doc["acquisition"]),
                   doc["width_px"], doc["height_px"], doc["media_type"], doc["storage_path"])


class AssetStore:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._manifest_path = self.root / "manifest.json"
        if self._manifest_path.exists():
            self._manifest = json.loads(self._manifest_path.read_text())
        else:
            self._manifest = {}

    def put(self, data: bytes, kind: str, acquisition) -> ImageAsset:
        media, ext, w, h = sniff_image(data)
        asset_id = hashlib.sha256(data).hexdigest()
        rel = f"objects/{asset_id[:2]}/{asset_id}.{ext}"
        path = self.root / rel
        acq = acquisition.to_dict()
        with self._lock:
            if not path.exists():
                _atomic_write(path, data)
            meta = self._manifest.setdefault(asset_id, {
                "media_type": media, "width_px": w, "height_px": h,
                "size_bytes": len(data), "path": rel, "acquisitions": [],
            })
            entry = {"kind": kind, "acquisition": acq}
            if entry not in meta["acquisitions"]:
                meta["acquisitions"].append(entry)
            self._flush()
        return ImageAsset(asset_id, kind, acquisition, w, h, media, rel)

    def _flush(self):
        _atomic_write(self._manifest_path,
                      (json.dumps(self._manifest, indent=2, sort_keys=True) + "\n").encode())

    def path_of(self, asset_id: str) -> Path:
        with self._lock:
            meta = self._manifest.get(asset_id)
        if meta is None:
            raise KeyError(f"asset {asset_id} is not in the store at {self.root}")
        return self.root / meta["path"]

    def read(self, asset_id: str) -> bytes:
        return self.path_of(asset_id).read_bytes()

    def metadata(self, asset_id: str) -> dict:
        with self._lock:
            return json.loads(json.dumps(self._manifest[asset_id]))

    def assets(self) -> list[ImageAsset]:
        """Every stored (asset, acquisition) pair, ordered by asset id."""
        with self._lock:
            items = sorted(self._manifest.items())
        out = []
        for asset_id, meta in items:
            for acq in meta["acquisitions"]:
                out.append(ImageAsset.from_dict({
                    "asset_id": asset_id, "kind": acq["kind"], "acquisition": acq["acquisition"],
                    "width_px": meta["width_px"], "height_px": meta["height_px"],
                    "media_type": meta["media_type"], "storage_path": meta["path"]}))
        return out

    def __contains__(self, asset_id):
        with self._lock:
            return asset_id in self._manifest

    def __len__(self):
        with self._lock:
            return len(self._manifest)
