"""Building data retrieval, multi-agent captioning and caption scoring."""

__version__ = "0.1.0"

from .assets import AssetStore, ImageAsset
from .errors import (BuildscopeError, CapabilityError, ConfigError, DomainError, IntakeError,
                     NotFoundError, ParseError, PipelineError, ReplayMissError, TransportError)
from .geo import (GeoPoint, PolygonRing, WorldPixel, destination_point, distance_m,
                  ground_resolution, initial_bearing, project, ring_centroid, unproject)
from .maps import BuildingBundle, BuildingQuery, BuildingRecord, MapsClient, StaticMapRequest
from .orbit import CameraPose, OrbitSpec, generate_orbit, subsample_by_heading
from .scoring import EmbeddingVector, ScoreTriplet, pac_score, score_caption, similarity_score
from .transport import HttpClient, HttpRequest, HttpResponse, RetryPolicy

__all__ = [
    "AssetStore", "BuildingBundle", "BuildingQuery", "BuildingRecord", "BuildscopeError",
    "CameraPose", "CapabilityError", "ConfigError", "DomainError", "EmbeddingVector",
    "GeoPoint", "HttpClient", "HttpRequest", "HttpResponse", "ImageAsset", "IntakeError",
    "MapsClient", "NotFoundError", "OrbitSpec", "ParseError", "PipelineError", "PolygonRing",
    "ReplayMissError", "RetryPolicy", "ScoreTriplet", "StaticMapRequest", "TransportError",
    "WorldPixel", "destination_point", "distance_m", "generate_orbit", "ground_resolution",
    "initial_bearing", "pac_score", "project", "ring_centroid", "score_caption",
    "similarity_score", "subsample_by_heading", "unproject",
]
