"""Coordinate types and spherical geodesy / Web Mercator helpers.

Everything here is a pure function on immutable values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DomainError

#: Standard tile cutoff latitude of spherical Web Mercator (degrees).
MERCATOR_MAX_LAT = 85.05113
TILE_SIZE = 256
MAX_ZOOM = 22

#: Semi-major axis used by Web Mercator (meters).
WEB_MERCATOR_RADIUS = 6378137.0
#: Mean earth radius used for great-circle geodesics (meters).
EARTH_RADIUS = 6371008.8


def normalize_lng(lng: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    out = math.fmod(lng + 180.0, 360.0)
    if out < 0:
        out += 360.0
    out -= 180.0
    # fmod can land exactly on +180 through rounding of tiny negatives
    return -180.0 if out >= 180.0 else out


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lng: float

    def __post_init__(self):
        lat, lng = float(self.lat), float(self.lng)
        if not (math.isfinite(lat) and math.isfinite(lng)):
            raise DomainError(f"non-finite coordinate ({lat}, {lng})")
        if not -90.0 <= lat <= 90.0:
            raise DomainError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lng", normalize_lng(lng))

    def as_tuple(self) -> tuple[float, float]:
        return (self.lat, self.lng)

    def __str__(self):
        return f"{self.lat:.7f},{self.lng:.7f}"


class ZoomLevel(int):
    """Integer map zoom level in [0, 22]."""

    def __new__(cls, z):
        if isinstance(z, float) and not z.is_integer():
            raise DomainError(f"zoom level must be an integer, got {z}")
        value = int(z)
        if not 0 <= value <= MAX_ZOOM:
            raise DomainError(f"zoom level {value} outside [0, {MAX_ZOOM}]")
        return super().__new__(cls, value)


def world_size(z: int) -> int:
    return TILE_SIZE << int(ZoomLevel(z))


@dataclass(frozen=True)
class WorldPixel:
    x: float
    y: float
    z: ZoomLevel

    def __post_init__(self):
        z = ZoomLevel(self.z)
        object.__setattr__(self, "z", z)
        size = world_size(z)
        if not (0.0 <= self.x < size and 0.0 <= self.y < size):
            raise DomainError(
                f"world pixel ({self.x}, {self.y}) outside [0, {size}) at zoom {int(z)}")


def _check_mercator_lat(lat: float):
    if abs(lat) > MERCATOR_MAX_LAT:
        raise DomainError(
            f"latitude {lat} outside the Web Mercator band of +/-{MERCATOR_MAX_LAT} degrees")


def project(p: GeoPoint, z: int) -> WorldPixel:
    """Spherical Web Mercator world-pixel coordinates of ``p`` at zoom ``z``."""
    _check_mercator_lat(p.lat)
    size = world_size(z)
    phi = math.radians(p.lat)
    x = (p.lng + 180.0) / 360.0 * size
    y = (1.0 - math.log(math.tan(phi) + 1.0 / math.cos(phi)) / math.pi) / 2.0 * size
    # the band edge is slightly beyond the exact square; keep pixels in-world
    upper = math.nextafter(float(size), 0.0)
    x = min(max(x, 0.0), upper)
    y = min(max(y, 0.0), upper)
    return WorldPixel(x, y, ZoomLevel(z))


def unproject(px: WorldPixel) -> GeoPoint:
    size = world_size(px.z)
    lng = px.x / size * 360.0 - 180.0
    n = math.pi * (1.0 - 2.0 * px.y / size)
    lat = math.degrees(math.atan(math.sinh(n)))
    return GeoPoint(lat, lng)


def ground_resolution(lat: float, z: int) -> float:
    """Meters per pixel at latitude ``lat`` on the Web Mercator map at zoom ``z``."""
    _check_mercator_lat(lat)
    equator = math.cos(math.radians(lat)) * 2.0 * math.pi * WEB_MERCATOR_RADIUS
    return equator / world_size(z)


def destination_point(origin: GeoPoint, bearing: float, distance: float) -> GeoPoint:
    """Great-circle destination on a spherical earth (radius ``EARTH_RADIUS``)."""
    if distance < 0 or not math.isfinite(distance):
        raise DomainError(f"distance must be a finite non-negative number, got {distance}")
    if distance == 0:
        return origin
    delta = distance / EARTH_RADIUS
    theta = math.radians(bearing)
    phi1 = math.radians(origin.lat)
    lam1 = math.radians(origin.lng)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    sin_phi2 = max(-1.0, min(1.0, sin_phi2))
    phi2 = math.asin(sin_phi2)
    if math.cos(phi2) < 1e-12:
        # longitude is undefined at a pole
        return GeoPoint(math.copysign(90.0, phi2), 0.0)
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    return GeoPoint(math.degrees(phi2), math.degrees(lam2))


def initial_bearing(a: GeoPoint, b: GeoPoint) -> float:
    """Forward azimuth at ``a`` of the great circle from ``a`` to ``b``, in [0, 360)."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlam = math.radians(b.lng - a.lng)
    y = math.sin(dlam) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlam)
    return math.degrees(math.atan2(y, x)) % 360.0


def final_bearing(a: GeoPoint, b: GeoPoint) -> float:
    """Azimuth of travel on arrival at ``b`` along the great circle from ``a``."""
    return (initial_bearing(b, a) + 180.0) % 360.0


def angular_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Central angle between two points in radians (haversine)."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lng - a.lng)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2.0 * math.asin(min(1.0, math.sqrt(h)))


def distance_m(a: GeoPoint, b: GeoPoint) -> float:
    return angular_distance(a, b) * EARTH_RADIUS


def bearing_difference(a: float, b: float) -> float:
    """Smallest absolute angle between two bearings, in [0, 180]."""
    d = abs(a - b) % 360.0
    return 360.0 - d if d > 180.0 else d


@dataclass(frozen=True)
class PolygonRing:
    """Closed ring of vertices; the first vertex is repeated at the end."""

    vertices: tuple[GeoPoint, ...]

    def __post_init__(self):
        verts = tuple(self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(set(verts)) < 3:
            raise DomainError("a polygon ring needs at least 3 distinct vertices")
        if verts[0] != verts[-1]:
            raise DomainError("polygon ring is not closed; build it with PolygonRing.from_points")

    @classmethod
    def from_points(cls, points: Iterable[GeoPoint | Sequence[float]]) -> "PolygonRing":
        """Normalize an open or closed vertex sequence into a ring.

        Consecutive duplicates are dropped and the ring is closed. Applying
        this to an existing ring's vertices returns an equal ring.
        """
        pts: list[GeoPoint] = []
        for p in points:
            gp = p if isinstance(p, GeoPoint) else GeoPoint(p[0], p[1])
            if not pts or pts[-1] != gp:
                pts.append(gp)
        while len(pts) > 1 and pts[-1] == pts[0]:
            pts.pop()
        if pts:
            pts.append(pts[0])
        return cls(tuple(pts))

    @property
    def open_vertices(self) -> tuple[GeoPoint, ...]:
        return self.vertices[:-1]


@dataclass(frozen=True)
class RingCentroid:
    point: GeoPoint
    area_m2: float
    degenerate: bool = False
    notes: dict = field(default_factory=dict, compare=False)


def planar_centroid(xy: Sequence[tuple[float, float]],
                    rel_tol: float = 1e-6) -> tuple[float, float, float] | None:
    """Shoelace centroid of a planar polygon given without the closing vertex.

    Returns ``(cx, cy, signed_area)``, or None when the area is negligible
    relative to the squared extent of the vertices.
    """
    n = len(xy)
    a2 = 0.0
    cx = 0.0
    cy = 0.0
    for k in range(n):
        x0, y0 = xy[k]
        x1, y1 = xy[(k + 1) % n]
        cross = x0 * y1 - x1 * y0
        a2 += cross
        cx += (x0 + x1) * cross
        cy += (y0 + y1) * cross
    xs = [p[0] for p in xy]
    ys = [p[1] for p in xy]
    extent2 = max(max(xs) - min(xs), max(ys) - min(ys)) ** 2
    if abs(a2) / 2.0 <= max(rel_tol * extent2, 1e-12):
        return None
    return cx / (3.0 * a2), cy / (3.0 * a2), a2 / 2.0


def _vertex_mean(points: Sequence[GeoPoint]) -> GeoPoint:
    ref = points[0].lng
    lat = sum(p.lat for p in points) / len(points)
    # unwrap relative to the first vertex so rings crossing the antimeridian average correctly
    lng = sum(ref + ((p.lng - ref + 180.0) % 360.0 - 180.0) for p in points) / len(points)
    return GeoPoint(lat, lng)


def _to_local(center: GeoPoint, p: GeoPoint) -> tuple[float, float]:
    # azimuthal equidistant: east/north meters from center
    c = angular_distance(center, p) * EARTH_RADIUS
    if c == 0.0:
        return (0.0, 0.0)
    theta = math.radians(initial_bearing(center, p))
    return (c * math.sin(theta), c * math.cos(theta))


def _from_local(center: GeoPoint, x: float, y: float) -> GeoPoint:
    dist = math.hypot(x, y)
    if dist == 0.0:
        return center
    return destination_point(center, math.degrees(math.atan2(x, y)), dist)


def ring_centroid(ring: PolygonRing) -> RingCentroid:
    """Area centroid of a ring computed in a local azimuthal projection.

    Zero-area rings fall back to the vertex mean with ``degenerate=True``.
    """
    verts = ring.open_vertices
    center = _vertex_mean(verts)
    local = [_to_local(center, p) for p in verts]
    res = planar_centroid(local)
    if res is None:
        return RingCentroid(center, 0.0, degenerate=True, notes={"fallback": "vertex-mean"})
    cx, cy, area = res
    return RingCentroid(_from_local(center, cx, cy), abs(area))
