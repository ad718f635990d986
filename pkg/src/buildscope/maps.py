"""Cloud-mapping client: geocoding, elevation and static maps.

The building bundle follows a small DAG: the geocode call resolves first and
everything else (elevation, any registered extra fetchers, static maps) fans
out from its coordinates in parallel. Only the documented subset of each
response is parsed; the rest of the geocoding result is kept verbatim in
``BuildingRecord.extra_json``.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .assets import AssetStore, ImageAsset
from .errors import ConfigError, DomainError, NotFoundError, ParseError, TransportError
from .geo import GeoPoint, PolygonRing, ZoomLevel, ring_centroid
from .transport import HttpClient, HttpRequest, HttpResponse

log = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://maps.googleapis.com/maps/api"
MAP_KINDS = ("roadmap", "satellite")
MAX_STATIC_SIZE = 2048

# fields of a geocoding result that are parsed; anything else is kept raw
_GEOCODE_FIELDS = {"formatted_address", "geometry", "place_id", "entrances", "buildings"}


def fmt_coord(x: float) -> str:
    out = f"{x:.7f}".rstrip("0").rstrip(".")
    return "0" if out in ("-0", "") else out


def fmt_point(p: GeoPoint) -> str:
    return f"{fmt_coord(p.lat)},{fmt_coord(p.lng)}"


@dataclass(frozen=True)
class BuildingQuery:
    """Exactly one of address, place name, postal code or coordinates."""

    address: str | None = None
    place_name: str | None = None
    postal_code: str | None = None
    coordinates: GeoPoint | None = None

    def __post_init__(self):
        for name in ("address", "place_name", "postal_code"):
            value = getattr(self, name)
            if value is not None:
                value = value.strip()
                if not value:
                    raise DomainError(f"{name} must not be empty")
                object.__setattr__(self, name, value)
        given = [n for n in ("address", "place_name", "postal_code", "coordinates")
                 if getattr(self, n) is not None]
        if len(given) != 1:
            raise DomainError(f"a building query needs exactly one variant, got {given or 'none'}")

    @property
    def kind(self) -> str:
        for name in ("address", "place_name", "postal_code", "coordinates"):
            if getattr(self, name) is not None:
                return name
        raise AssertionError("unreachable")

    @property
    def value(self):
        return getattr(self, self.kind)

    def __str__(self):
        v = self.value
        return f"{self.kind}={fmt_point(v) if isinstance(v, GeoPoint) else v}"

    def to_dict(self) -> dict:
        v = self.value
        return {self.kind: [v.lat, v.lng] if isinstance(v, GeoPoint) else v}

    @classmethod
    def from_dict(cls, doc: dict) -> "BuildingQuery":
        if "coordinates" in doc:
            lat, lng = doc["coordinates"]
            return cls(coordinates=GeoPoint(lat, lng))
        return cls(**doc)


@dataclass(frozen=True)
class RequestRef:
    call: str
    request_id: str


@dataclass
class BuildingRecord:
    formatted_address: str
    location: GeoPoint
    place_id: str
    entrances: list[GeoPoint] = field(default_factory=list)
    footprint: PolygonRing | None = None
    ground_elevation: float | None = None
    provenance: list[RequestRef] = field(default_factory=list)
    extra_json: str = "{}"

    def to_dict(self) -> dict:
        return {
            "formatted_address": self.formatted_address,
            "location": [self.location.lat, self.location.lng],
            "place_id": self.place_id,
            "entrances": [[p.lat, p.lng] for p in self.entrances],
            "footprint": ([[p.lat, p.lng] for p in self.footprint.vertices]
                          if self.footprint else None),
            "ground_elevation": self.ground_elevation,
            "provenance": [{"call": r.call, "request_id": r.request_id} for r in self.provenance],
            "extra_json": self.extra_json,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BuildingRecord":
        fp = doc.get("footprint")
        return cls(
            formatted_address=doc["formatted_address"],
            location=GeoPoint(*doc["location"]),
            place_id=doc["place_id"],
            entrances=[GeoPoint(*p) for p in doc.get("entrances", [])],
            footprint=PolygonRing.from_points(fp) if fp else None,
            ground_elevation=doc.get("ground_elevation"),
            provenance=[RequestRef(r["call"], r["request_id"]) for r in doc.get("provenance", [])],
            extra_json=doc.get("extra_json", "{}"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class StaticMapRequest:
    center: GeoPoint
    zoom: ZoomLevel
    map_kind: str = "satellite"
    width_px: int = 640
    height_px: int = 640
    overlay: PolygonRing | None = None

    def __post_init__(self):
        object.__setattr__(self, "zoom", ZoomLevel(self.zoom))
        if self.map_kind not in MAP_KINDS:
            raise DomainError(f"map kind must be one of {MAP_KINDS}, got {self.map_kind!r}")
        for dim in (self.width_px, self.height_px):
            if not 1 <= dim <= MAX_STATIC_SIZE:
                raise DomainError(f"static map size {dim} outside [1, {MAX_STATIC_SIZE}]")

    @property
    def asset_kind(self) -> str:
        return "satellite" if self.map_kind == "satellite" else "street_map"

    def params(self) -> dict:
        out = {
            "center": fmt_point(self.center),
            "zoom": str(int(self.zoom)),
            "size": f"{self.width_px}x{self.height_px}",
            "maptype": self.map_kind,
        }
        if self.overlay is not None:
            pts = "|".join(fmt_point(p) for p in self.overlay.vertices)
            out["path"] = f"color:0xff0000ff|weight:2|{pts}"
        return out

    def to_dict(self) -> dict:
        return {
            "center": [self.center.lat, self.center.lng],
            "zoom": int(self.zoom),
            "map_kind": self.map_kind,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "overlay": ([[p.lat, p.lng] for p in self.overlay.vertices]
                        if self.overlay else None),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StaticMapRequest":
        ov = doc.get("overlay")
        return cls(GeoPoint(*doc["center"]), doc["zoom"], doc["map_kind"], doc["width_px"],
                   doc["height_px"], PolygonRing.from_points(ov) if ov else None)


@dataclass
class CallRecord:
    name: str
    request_id: str | None
    started: float
    finished: float
    error: str | None = None


@dataclass
class BuildingBundle:
    record: BuildingRecord
    assets: list[ImageAsset]
    errors: dict[str, str] = field(default_factory=dict)
    extras: dict[str, object] = field(default_factory=dict)
    calls: list[CallRecord] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.errors

    def __iter__(self):
        # allows ``record, assets = bundle``
        return iter((self.record, self.assets))


#: fetcher(client, record) -> (value, request_id)
Fetcher = Callable[["MapsClient", BuildingRecord], tuple[object, str]]


def _elevation_fetcher(client: "MapsClient", record: BuildingRecord):
    value, rid = client.elevation_with_id(record.location)
    record.ground_elevation = value
    return value, rid


class MapsClient:
    def __init__(self, http: HttpClient, assets: AssetStore, *, api_key: str | None = None,
                 base_url: str | None = None, require_key: bool = False,
                 max_parallel: int = 4):
        if require_key and not api_key:
            raise ConfigError("MAPS_API_KEY is not set; live requests need an API key")
        self.http = http
        self.assets = assets
        self._api_key = api_key
        self.base_url = (base_url or DEFAULT_BASE_URL).rstrip("/")
        self.max_parallel = max_parallel
        self.fetchers: dict[str, Fetcher] = {"elevation": _elevation_fetcher}

    def __repr__(self):
        # never show the key
        return f"MapsClient(base_url={self.base_url!r})"

    def register_fetcher(self, name: str, fetcher: Fetcher):
        self.fetchers[name] = fetcher

    def _request(self, path: str, params: dict) -> HttpRequest:
        if self._api_key:
            params = {**params, "key": self._api_key}
        return HttpRequest.get(f"{self.base_url}/{path}", params)

    # ------------------------------------------------------------------ geocode

    def geocode_request(self, q: BuildingQuery) -> HttpRequest:
        params: dict[str, str] = {}
        if q.kind == "coordinates":
            params["latlng"] = fmt_point(q.coordinates)
        elif q.kind == "postal_code":
            params["components"] = f"postal_code:{q.postal_code}"
        else:
            params["address"] = q.value
        params["extra_computations"] = "BUILDING_AND_ENTRANCES"
        return self._request("geocode/json", params)

    def geocode(self, q: BuildingQuery) -> BuildingRecord:
        req = self.geocode_request(q)
        resp = self.http.fetch(req)
        record = parse_geocode(resp, q)
        record.provenance.append(RequestRef("geocode", req.signature))
        return record

    # ---------------------------------------------------------------- elevation

    def elevation_request(self, p: GeoPoint) -> HttpRequest:
        return self._request("elevation/json", {"locations": fmt_point(p)})

    def elevation_with_id(self, p: GeoPoint) -> tuple[float, str]:
        req = self.elevation_request(p)
        return parse_elevation(self.http.fetch(req)), req.signature

    def elevation(self, p: GeoPoint) -> float:
        return self.elevation_with_id(p)[0]

    # -------------------------------------------------------------- static maps

    def static_map_request(self, req: StaticMapRequest) -> HttpRequest:
        return self._request("staticmap", req.params())

    def static_map(self, req: StaticMapRequest) -> ImageAsset:
        resp = self.http.fetch(self.static_map_request(req))
        return self.assets.put(resp.body, req.asset_kind, req)

    # ------------------------------------------------------------------- bundle

    def retrieve_building_bundle(self, q: BuildingQuery, zooms: Sequence[int] = (18, 19), *,
                                 map_kinds: Sequence[str] = ("satellite",),
                                 roadmap_zoom: int | None = None,
                                 size: tuple[int, int] = (640, 640), overlay: bool = False,
                                 fetchers: Sequence[str] = ("elevation",)) -> BuildingBundle:
        """Geocode, then fan out to fetchers and static maps.

        Issues ``1 + len(fetchers) + len(zooms) * len(map_kinds)`` requests
        on a cold cache, plus one when ``roadmap_zoom`` is given. Geocode
        failure raises; downstream failures are collected in ``errors``.
        """
        unknown = [f for f in fetchers if f not in self.fetchers]
        if unknown:
            raise ConfigError(f"no fetcher registered under {unknown}")

        t0 = time.monotonic()
        greq = self.geocode_request(q)
        record = self.geocode(q)
        calls = [CallRecord("geocode", greq.signature, t0, time.monotonic())]

        center = record.location
        if record.footprint is not None:
            c = ring_centroid(record.footprint)
            if not c.degenerate:
                center = c.point
        ring = record.footprint if overlay else None
        map_reqs = [StaticMapRequest(center, z, kind, size[0], size[1], ring)
                    for z in zooms for kind in map_kinds]
        if roadmap_zoom is not None:
            map_reqs.append(StaticMapRequest(center, roadmap_zoom, "roadmap", size[0], size[1], ring))

        def run_fetcher(name):
            start = time.monotonic()
            try:
                value, rid = self.fetchers[name](self, record)
            except (TransportError, ParseError, NotFoundError) as exc:
                return name, None, CallRecord(name, None, start, time.monotonic(), str(exc))
            return name, value, CallRecord(name, rid, start, time.monotonic())

        def run_map(req):
            start = time.monotonic()
            label = f"static_map:{req.map_kind}@{int(req.zoom)}"
            rid = self.static_map_request(req).signature
            try:
                asset = self.static_map(req)
            except (TransportError, ParseError) as exc:
                return label, None, CallRecord(label, rid, start, time.monotonic(), str(exc))
            return label, asset, CallRecord(label, rid, start, time.monotonic())

        extras: dict[str, object] = {}
        errors: dict[str, str] = {}
        assets: list[ImageAsset] = []
        with ThreadPoolExecutor(max_workers=max(1, self.max_parallel)) as pool:
            fetch_futs = [pool.submit(run_fetcher, name) for name in fetchers]
            map_futs = [pool.submit(run_map, r) for r in map_reqs]
            for fut in fetch_futs:
                name, value, call = fut.result()
                calls.append(call)
                if call.error:
                    errors[name] = call.error
                else:
                    extras[name] = value
                    record.provenance.append(RequestRef(name, call.request_id))
            for fut in map_futs:
                label, asset, call = fut.result()
                calls.append(call)
                if call.error:
                    errors[label] = call.error
                else:
                    assets.append(asset)
        for label, msg in errors.items():
            log.warning("bundle call %s failed: %s", label, msg)
        return BuildingBundle(record, assets, errors, extras, calls)


# ---------------------------------------------------------------------------
# response parsing


def _json_document(resp: HttpResponse) -> dict:
    try:
        doc = resp.json()
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError("response is not a JSON document", resp.text()[:200]) from exc
    if not isinstance(doc, dict):
        raise ParseError("response is not a JSON object", resp.text()[:200])
    return doc


def _check_status(doc: dict, resp: HttpResponse, query=None):
    status = doc.get("status")
    if status == "OK":
        return
    if status == "ZERO_RESULTS":
        raise NotFoundError(f"no results for {query}", query=query)
    if status is None:
        raise ParseError("response has no status field", resp.text()[:200])
    raise TransportError(f"provider returned status {status}: {doc.get('error_message', '')}")


def _latlng(obj, excerpt) -> GeoPoint:
    try:
        if "lat" in obj:
            return GeoPoint(obj["lat"], obj["lng"])
        return GeoPoint(obj["latitude"], obj["longitude"])
    except (KeyError, TypeError) as exc:
        raise ParseError("malformed location", excerpt) from exc


def parse_geocode(resp: HttpResponse, query=None) -> BuildingRecord:
    doc = _json_document(resp)
    _check_status(doc, resp, query)
    excerpt = resp.text()[:200]
    results = doc.get("results")
    if not results:
        raise NotFoundError(f"no results for {query}", query=query)
    res = results[0]
    try:
        location = _latlng(res["geometry"]["location"], excerpt)
        address = res["formatted_address"]
        place_id = res["place_id"]
    except (KeyError, TypeError) as exc:
        raise ParseError("geocoding result is missing required fields", excerpt) from exc

    entrances = [_latlng(e["location"], excerpt) for e in res.get("entrances", [])
                 if "location" in e]
    footprint = None
    for building in res.get("buildings", []):
        for outline in building.get("building_outlines", []):
            poly = outline.get("display_polygon") or {}
            coords = poly.get("coordinates")
            if not coords:
                continue
            if poly.get("type") == "MultiPolygon":
                coords = coords[0]
            try:
                # GeoJSON order is [lng, lat]
                footprint = PolygonRing.from_points([(c[1], c[0]) for c in coords[0]])
            except (DomainError, IndexError, TypeError) as exc:
                raise ParseError("malformed building outline", excerpt) from exc
            break
        if footprint is not None:
            break

    extra = {k: v for k, v in res.items() if k not in _GEOCODE_FIELDS}
    return BuildingRecord(address, location, place_id, entrances, footprint,
                          extra_json=json.dumps(extra, sort_keys=True))


def parse_elevation(resp: HttpResponse) -> float:
    doc = _json_document(resp)
    _check_status(doc, resp)
    try:
        return float(doc["results"][0]["elevation"])
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ParseError("elevation result is malformed", resp.text()[:200]) from exc


# ---------------------------------------------------------------------------
# deterministic offline provider


def _unit(seed: str, salt: str) -> float:
    h = hashlib.sha256(f"{salt}:{seed}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2 ** 64


class MockMapsTransport:
    """Synthesizes plausible geocoding, elevation and static-map responses.

    Every response is a pure function of the request's public parameters.
    """

    def __init__(self, render_limit: int = 256):
        self.render_limit = render_limit
        self.calls: list[str] = []

    def __call__(self, request: HttpRequest) -> HttpResponse:
        self.calls.append(request.canonical())
        params = dict(request.public_params())
        path = request.url.rsplit("/api/", 1)[-1]
        if path.startswith("geocode"):
            return self._geocode(params)
        if path.startswith("elevation"):
            lat, lng = map(float, params["locations"].split(","))
            value = round(_unit(params["locations"], "elev") * 500.0, 1)
            body = {"status": "OK", "results": [
                {"elevation": value, "location": {"lat": lat, "lng": lng}, "resolution": 9.5}]}
            return HttpResponse(200, json.dumps(body).encode(), "application/json")
        if path.startswith("staticmap"):
            return self._image(params)
        return HttpResponse(404, b"unknown endpoint", "text/plain")

    def _geocode(self, params):
        if "latlng" in params:
            lat, lng = map(float, params["latlng"].split(","))
            seed = params["latlng"]
            address = f"Mock address near {params['latlng']}"
        else:
            seed = params.get("address") or params.get("components", "")
            lat = -50.0 + 100.0 * _unit(seed, "lat")
            lng = -170.0 + 340.0 * _unit(seed, "lng")
            address = f"{seed.split(':')[-1]} (mock)"
        d = 0.00015
        ring = [[lng - d, lat - d], [lng + d, lat - d], [lng + d, lat + d],
                [lng - d, lat + d], [lng - d, lat - d]]
        pid = "mock-" + hashlib.sha256(seed.encode()).hexdigest()[:20]
        result = {
            "formatted_address": address,
            "geometry": {"location": {"lat": lat, "lng": lng}, "location_type": "ROOFTOP"},
            "place_id": pid,
            "types": ["premise"],
            "entrances": [{"location": {"lat": lat - d, "lng": lng},
                           "entrance_tags": ["PREFERRED"], "building_place_id": pid}],
            "buildings": [{"place_id": pid, "building_outlines": [
                {"display_polygon": {"type": "Polygon", "coordinates": [ring]}, "unit": "ENTIRE_BUILDING"}]}],
        }
        body = {"status": "OK", "results": [result]}
        return HttpResponse(200, json.dumps(body).encode(), "application/json")

    def _image(self, params):
        from PIL import Image

        w, h = (int(v) for v in params.get("size", "64x64").split("x"))
        w, h = min(w, self.render_limit), min(h, self.render_limit)
        key = json.dumps(params, sort_keys=True)
        color = tuple(int(_unit(key, c) * 255) for c in "rgb")
        im = Image.new("RGB", (w, h), color)
        buf = io.BytesIO()
        im.save(buf, format="PNG")
        return HttpResponse(200, buf.getvalue(), "image/png")


def maps_env() -> tuple[str | None, str]:
    return os.environ.get("MAPS_API_KEY"), os.environ.get("MAPS_BASE_URL", DEFAULT_BASE_URL)
