"""Orbital camera paths around a building and intake of rendered frames."""
from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .assets import AssetStore, ImageAsset
from .errors import DomainError, IntakeError, ParseError
from .geo import (GeoPoint, bearing_difference, destination_point, final_bearing,
                  initial_bearing)

ORBIT_FORMAT = "buildscope-orbit"
ORBIT_VERSION = 1
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".webp", ".bmp", ".tif", ".tiff")

_POSITION_TOL_DEG = 1e-9


@dataclass(frozen=True)
class CameraPose:
    """One camera on an orbit.

    ``heading_deg`` is the azimuth of the camera as seen from the target;
    the camera sits ``orbit_radius_m`` away along that azimuth and looks back
    at the target.
    """

    target: GeoPoint
    camera_position: GeoPoint
    altitude_m: float
    heading_deg: float
    tilt_deg: float
    orbit_radius_m: float

    def __post_init__(self):
        if not 0.0 <= self.heading_deg < 360.0:
            raise DomainError(f"heading {self.heading_deg} outside [0, 360)")
        expected = destination_point(self.target, self.heading_deg, self.orbit_radius_m)
        if (abs(expected.lat - self.camera_position.lat) > _POSITION_TOL_DEG
                or bearing_difference(expected.lng, self.camera_position.lng) > _POSITION_TOL_DEG):
            raise DomainError("camera position is not on the orbit at the stated heading")

    @property
    def look_at_bearing(self) -> float:
        """Bearing of the camera-to-target sight line where it meets the target."""
        return final_bearing(self.camera_position, self.target)

    @property
    def camera_yaw_deg(self) -> float:
        """Compass direction the camera faces, measured at the camera."""
        return initial_bearing(self.camera_position, self.target)

    def to_dict(self) -> dict:
        return {
            "target": [self.target.lat, self.target.lng],
            "camera_position": [self.camera_position.lat, self.camera_position.lng],
            "altitude_m": self.altitude_m,
            "heading_deg": self.heading_deg,
            "tilt_deg": self.tilt_deg,
            "orbit_radius_m": self.orbit_radius_m,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraPose":
        return cls(GeoPoint(*doc["target"]), GeoPoint(*doc["camera_position"]),
                   doc["altitude_m"], doc["heading_deg"], doc["tilt_deg"], doc["orbit_radius_m"])


@dataclass(frozen=True)
class OrbitSpec:
    target: GeoPoint
    count: int = 31
    orbit_radius_m: float = 250.0
    altitude_m: float = 150.0
    tilt_deg: float = 45.0
    start_heading_deg: float = 0.0

    def __post_init__(self):
        if self.count < 1:
            raise DomainError("orbit count must be >= 1")
        if not self.orbit_radius_m > 0:
            raise DomainError("orbit radius must be positive")


def generate_orbit(spec: OrbitSpec) -> list[CameraPose]:
    gap = 360.0 / spec.count
    poses = []
    for k in range(spec.count):
        heading = (spec.start_heading_deg + k * gap) % 360.0
        pos = destination_point(spec.target, heading, spec.orbit_radius_m)
        poses.append(CameraPose(spec.target, pos, spec.altitude_m, heading,
                                spec.tilt_deg, spec.orbit_radius_m))
    return poses


def _circ(a: float, b: float) -> float:
    return bearing_difference(a, b)


def subsample_by_heading(poses: Sequence[CameraPose], step_deg: float) -> list[CameraPose]:
    """Pick the pose nearest to each of 0, step, 2*step, ... (< 360) degrees.

    Headings are measured relative to the first pose. Ties go to the lower
    index and the result keeps orbit order.
    """
    if not poses:
        raise DomainError("cannot subsample an empty pose list")
    if not step_deg > 0:
        raise DomainError("step must be positive")
    h0 = poses[0].heading_deg
    rel = [(p.heading_deg - h0) % 360.0 for p in poses]
    chosen = []
    k = 0
    while k * step_deg < 360.0:
        target = k * step_deg
        best = min(range(len(poses)), key=lambda i: (round(_circ(rel[i], target), 9), i))
        if best not in chosen:
            chosen.append(best)
        k += 1
    return [poses[i] for i in sorted(chosen)]


# ---------------------------------------------------------------------------
# keyframe document


def export_orbit_document(poses: Sequence[CameraPose]) -> str:
    if not poses:
        raise DomainError("cannot export an empty orbit")
    target = poses[0].target
    frames = []
    for idx, p in enumerate(poses):
        if p.target != target:
            raise DomainError("all poses of one orbit document must share a target")
        frames.append({
            "index": idx,
            "camera": {"lat": p.camera_position.lat, "lng": p.camera_position.lng,
                       "altitude_m": p.altitude_m},
            "heading_deg": p.heading_deg,
            "tilt_deg": p.tilt_deg,
            "orbit_radius_m": p.orbit_radius_m,
            "yaw_deg": p.camera_yaw_deg,
        })
    doc = {
        "format": ORBIT_FORMAT,
        "version": ORBIT_VERSION,
        "target": {"lat": target.lat, "lng": target.lng},
        "frame_count": len(frames),
        "frames": frames,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_orbit_document(text: str) -> list[CameraPose]:
    try:
        doc = json.loads(text)
        if doc.get("format") != ORBIT_FORMAT:
            raise ParseError("not an orbit document", text[:80])
        if doc.get("version") != ORBIT_VERSION:
            raise ParseError(f"unsupported orbit document version {doc.get('version')}")
        target = GeoPoint(doc["target"]["lat"], doc["target"]["lng"])
        frames = sorted(doc["frames"], key=lambda f: f["index"])
        return [
            CameraPose(target, GeoPoint(f["camera"]["lat"], f["camera"]["lng"]),
                       f["camera"]["altitude_m"], f["heading_deg"], f["tilt_deg"],
                       f["orbit_radius_m"])
            for f in frames
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError("malformed orbit document", text[:80]) from exc


def write_orbit_document(poses: Sequence[CameraPose], path) -> Path:
    path = Path(path)
    path.write_text(export_orbit_document(poses))
    return path


# ---------------------------------------------------------------------------
# intake

_FRAME_RE = re.compile(r"^frame_(\d{3,})$")


@dataclass
class IntakeResult:
    assets: list[ImageAsset]
    failures: dict[int, str] = field(default_factory=dict)


def intake_images(directory, poses: Sequence[CameraPose], store: AssetStore,
                  max_workers: int = 4) -> IntakeResult:
    """Hash ``frame_{index:03}.<ext>`` files into the store, one per pose.

    Missing frames abort with an IntakeError naming every missing index.
    Unreadable files are reported in ``failures`` and the rest proceed.
    """
    directory = Path(directory)
    found: dict[int, Path] = {}
    if directory.is_dir():
        for path in sorted(directory.iterdir()):
            m = _FRAME_RE.match(path.stem)
            if m and path.suffix.lower() in IMAGE_EXTENSIONS:
                found.setdefault(int(m.group(1)), path)
    missing = [i for i in range(len(poses)) if i not in found]
    if missing:
        raise IntakeError(f"missing frames in {directory}: {missing}", missing)

    def load(idx):
        try:
            return idx, store.put(found[idx].read_bytes(), "oblique_orbit", poses[idx]), None
        except (ParseError, OSError) as exc:
            return idx, None, f"{found[idx].name}: {exc}"

    result = IntakeResult([])
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for idx, asset, err in pool.map(load, range(len(poses))):
            if err:
                result.failures[idx] = err
            else:
                result.assets.append(asset)
    return result
