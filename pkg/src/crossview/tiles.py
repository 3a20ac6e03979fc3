"""Satellite tile geometry and WMS GetMap fetching.

The bounding-box math is the equirectangular small-area approximation: at a
2.56 km span the divergence from true geodesics is far below the tile's own
ground sampling distance. Tiles are fetched over WMS 1.3.0 with CRS:84
(longitude-latitude axis order) through an injected HTTP client, with
retry/backoff and an on-disk cache keyed by the rounded bounding box.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from urllib.parse import urlencode

from .errors import FetchError, ProtocolError, RangeError

METERS_PER_DEGREE_LAT = 111320.0
# 256 px spanning 2560 m; the imagery source's resolution implied by the
# 6.55 km^2 tile footprint
GROUND_SAMPLING_M = 10.0
DEFAULT_SPAN_M = 2560.0
DEFAULT_PIXELS = 256


@dataclass(frozen=True)
class TileSpec:
    center_lat: float
    center_lon: float
    bbox: tuple[float, float, float, float]
    span_m: float = DEFAULT_SPAN_M
    pixels: int = DEFAULT_PIXELS

    def __post_init__(self):
        if self.span_m <= 0:
            raise RangeError(f"span_m {self.span_m} must be positive")
        if self.pixels <= 0:
            raise RangeError(f"pixels {self.pixels} must be positive")
        min_lon, min_lat, max_lon, max_lat = self.bbox
        if not (min_lon <= self.center_lon <= max_lon and min_lat <= self.center_lat <= max_lat):
            raise RangeError("bbox does not contain its center")

    @property
    def area_km2(self) -> float:
        return (self.span_m / 1000.0) ** 2


def tile_bbox(lat: float, lon: float, span_m: float = DEFAULT_SPAN_M, pixels: int = DEFAULT_PIXELS) -> TileSpec:
    """Tile footprint centered at (lat, lon) spanning span_m meters per side."""
    if abs(lat) >= 89.0:
        raise RangeError(f"latitude {lat} unsupported: tile width degenerates near the poles")
    dlat = span_m / METERS_PER_DEGREE_LAT
    dlon = span_m / (METERS_PER_DEGREE_LAT * math.cos(math.radians(lat)))
    return TileSpec(
        center_lat=lat,
        center_lon=lon,
        span_m=span_m,
        pixels=pixels,
        bbox=(lon - dlon / 2.0, lat - dlat / 2.0, lon + dlon / 2.0, lat + dlat / 2.0),
    )


def bbox_span_meters(spec: TileSpec) -> tuple[float, float]:
    """Inverse of the bbox construction: (east-west, north-south) meters."""
    min_lon, min_lat, max_lon, max_lat = spec.bbox
    ew = (max_lon - min_lon) * METERS_PER_DEGREE_LAT * math.cos(math.radians(spec.center_lat))
    ns = (max_lat - min_lat) * METERS_PER_DEGREE_LAT
    return ew, ns


@dataclass(frozen=True)
class WmsRequest:
    endpoint: str
    params: dict

    @property
    def query_string(self) -> str:
        return urlencode(self.params)

    @property
    def url(self) -> str:
        return f"{self.endpoint}?{self.query_string}"


def build_wms_request(spec: TileSpec, layer: str, endpoint: str) -> WmsRequest:
    """WMS 1.3.0 GetMap descriptor. CRS:84 keeps BBOX in lon-lat order."""
    min_lon, min_lat, max_lon, max_lat = spec.bbox
    params = {
        "SERVICE": "WMS",
        "VERSION": "1.3.0",
        "REQUEST": "GetMap",
        "LAYERS": layer,
        "CRS": "CRS:84",
        "BBOX": f"{min_lon!r},{min_lat!r},{max_lon!r},{max_lat!r}",
        "WIDTH": spec.pixels,
        "HEIGHT": spec.pixels,
        "FORMAT": "image/jpeg",
    }
    return WmsRequest(endpoint=endpoint, params=params)


class RequestsClient:
    """Thin HTTP adapter so tests can inject a fake with the same surface."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout

    def get(self, url: str) -> tuple[int, bytes, str]:
        import requests

        resp = requests.get(url, timeout=self.timeout)
        return resp.status_code, resp.content, resp.headers.get("Content-Type", "")


def cache_key(spec: TileSpec, layer: str) -> str:
    min_lon, min_lat, max_lon, max_lat = spec.bbox
    return (
        f"{layer}_{min_lon:.6f}_{min_lat:.6f}_{max_lon:.6f}_{max_lat:.6f}_{spec.pixels}.jpg"
    )


def fetch_tile(
    spec: TileSpec,
    layer: str,
    endpoint: str,
    client,
    cache_dir: str,
    record_id: str | None = None,
    retries: int = 3,
    backoff_s: float = 0.1,
    sleep=time.sleep,
) -> str:
    """Fetch one tile to the cache directory, returning its path.

    A cached tile short-circuits the network entirely. Writes go to a temp
    file then rename, so a crashed fetch never leaves a partial tile that a
    later run would trust.
    """
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, cache_key(spec, layer))
    if os.path.exists(path):
        return path
    request = build_wms_request(spec, layer, endpoint)
    who = f"record {record_id}" if record_id is not None else "tile"
    last_error = None
    for attempt in range(retries):
        try:
            status, content, content_type = client.get(request.url)
        except Exception as exc:  # transport-level failure, retry
            last_error = exc
            sleep(backoff_s * (2 ** attempt))
            continue
        if status != 200:
            last_error = FetchError(f"{who}: HTTP {status} from {endpoint}")
            sleep(backoff_s * (2 ** attempt))
            continue
        if not content_type.startswith("image/"):
            raise ProtocolError(
                f"{who}: expected an image response, got {content_type!r}"
            )
        tmp = path + f".tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(content)
        os.replace(tmp, path)
        return path
    raise FetchError(f"{who}: fetch failed after {retries} attempts: {last_error}")
