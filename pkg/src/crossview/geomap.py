"""Species-distribution mapping: regular geographic grids, query-vs-tile
similarity scoring with the negative clamp, inverse-distance-weighted
rasterization, map export, and KMeans clustering of observation
coordinates into geo-classification labels.

Distances are Euclidean in raw degrees throughout; at desk scale the
distortion is irrelevant and the clustering procedure is defined directly
on latitude/longitude values.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import ContractError, FetchError, RangeError
from .models import CveMae
from .rng import stream


@dataclass(frozen=True)
class GeoGrid:
    bbox: tuple[float, float, float, float]  # (min_lon, min_lat, max_lon, max_lat)
    step: float
    centers: tuple[tuple[float, float], ...]  # (lat, lon), row-major south to north
    shape: tuple[int, int]  # (n_lat, n_lon)


def make_grid(bbox: tuple[float, float, float, float], step: float) -> GeoGrid:
    """Cell centers at min + (i + 0.5) * step along each axis, row-major."""
    min_lon, min_lat, max_lon, max_lat = bbox
    if step <= 0:
        raise RangeError(f"step {step} must be positive")
    if max_lon <= min_lon or max_lat <= min_lat:
        raise RangeError(f"empty bbox {bbox}")
    n_lat = math.ceil((max_lat - min_lat) / step)
    n_lon = math.ceil((max_lon - min_lon) / step)
    centers = tuple(
        (min_lat + (i + 0.5) * step, min_lon + (j + 0.5) * step)
        for i in range(n_lat)
        for j in range(n_lon)
    )
    return GeoGrid(bbox=bbox, step=step, centers=centers, shape=(n_lat, n_lon))


def score_grid(
    query_ground_image,
    tiles,
    model: CveMae,
    query_meta=None,
    batch_size: int = 32,
) -> np.ndarray:
    """Clamped cosine similarity between the query's ground embedding and
    each grid cell's satellite tile embedding. tiles must align with the
    grid's centers; a missing tile (None) aborts with its cell index."""
    for i, tile in enumerate(tiles):
        if tile is None:
            raise FetchError(f"missing satellite tile for grid cell {i}")
    with torch.no_grad():
        q = model.embed_ground(np.asarray(query_ground_image)[None])[0].numpy()
        scores = []
        tiles_arr = np.asarray(tiles)
        for start in range(0, tiles_arr.shape[0], batch_size):
            batch = tiles_arr[start : start + batch_size]
            metas = [query_meta] * batch.shape[0] if query_meta is not None else None
            emb = model.embed_satellite(batch, metas).numpy()
            scores.append(emb @ q)
    return clamp_nonnegative(np.concatenate(scores))


def clamp_nonnegative(values: np.ndarray) -> np.ndarray:
    return np.maximum(values, 0.0)


@dataclass
class ScoreRaster:
    bbox: tuple[float, float, float, float]
    resolution: float
    values: np.ndarray  # (n_lat, n_lon), row 0 at min_lat

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractError(f"raster values must be 2-D, got {self.values.shape}")
        if (self.values < 0).any():
            raise RangeError("raster contains negative values; clamp before rasterizing")

    @property
    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        min_lon, min_lat, _, _ = self.bbox
        n_lat, n_lon = self.values.shape
        lats = min_lat + (np.arange(n_lat) + 0.5) * self.resolution
        lons = min_lon + (np.arange(n_lon) + 0.5) * self.resolution
        return lats, lons


def idw_interpolate(
    points: list[tuple[float, float, float]],
    bbox: tuple[float, float, float, float],
    resolution: float = 0.01,
    power: float = 2.0,
    eps: float = 1e-12,
) -> ScoreRaster:
    """Inverse-distance weighting of scattered (lat, lon, value) points onto
    a regular raster. All points contribute to every cell; a cell whose
    center lies within eps of a point takes that point's value exactly."""
    if not points:
        raise ContractError("IDW needs at least one point")
    grid = make_grid(bbox, resolution)
    pts = np.array([(p[0], p[1]) for p in points], dtype=np.float64)
    vals = np.array([p[2] for p in points], dtype=np.float64)
    centers = np.array(grid.centers, dtype=np.float64)

    diff = centers[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    weights = 1.0 / (dist ** power + eps)
    out = weights @ vals / weights.sum(axis=1)

    at_node = dist < eps
    node_rows = at_node.any(axis=1)
    if node_rows.any():
        out[node_rows] = vals[np.argmax(at_node[node_rows], axis=1)]
    return ScoreRaster(bbox=bbox, resolution=resolution, values=out.reshape(grid.shape))


def export_map(raster: ScoreRaster, csv_path: str | None = None, png_path: str | None = None) -> None:
    """Write the raster as (a) full-precision CSV rows and (b) a north-up
    grayscale PNG linearly scaled from [0, max]."""
    lats, lons = raster.cell_centers
    if csv_path is not None:
        tmp = csv_path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            min_lon, min_lat, max_lon, max_lat = raster.bbox
            writer.writerow(
                ["#bbox", repr(min_lon), repr(min_lat), repr(max_lon), repr(max_lat), repr(raster.resolution)]
            )
            writer.writerow(["lat", "lon", "score"])
            for i, lat in enumerate(lats):
                for j, lon in enumerate(lons):
                    writer.writerow([repr(float(lat)), repr(float(lon)), repr(float(raster.values[i, j]))])
        os.replace(tmp, csv_path)
    if png_path is not None:
        peak = float(raster.values.max())
        scaled = raster.values / peak if peak > 0 else np.zeros_like(raster.values)
        img = np.flipud(np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8))
        tmp = png_path + ".tmp"
        Image.fromarray(img, "L").save(tmp, format="PNG")
        os.replace(tmp, png_path)


def read_map_csv(path: str) -> ScoreRaster:
    """Inverse of export_map's CSV writer."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        meta = next(reader)
        if meta[0] != "#bbox":
            raise ContractError(f"{path}: missing raster metadata row")
        bbox = tuple(float(v) for v in meta[1:5])
        resolution = float(meta[5])
        next(reader)  # column header
        values = [float(row[2]) for row in reader]
    n_lat = math.ceil((bbox[3] - bbox[1]) / resolution)
    n_lon = math.ceil((bbox[2] - bbox[0]) / resolution)
    return ScoreRaster(
        bbox=bbox, resolution=resolution,
        values=np.array(values, dtype=np.float64).reshape(n_lat, n_lon),
    )


@dataclass
class GeoClusterModel:
    centroids: np.ndarray  # (k, 2) of (lat, lon)
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise RangeError(f"k {self.k} must be >= 1")
        if self.centroids.shape != (self.k, 2):
            raise ContractError(f"centroids shape {self.centroids.shape} != ({self.k}, 2)")
        if len(np.unique(self.centroids, axis=0)) != self.k:
            raise ContractError("centroids must be distinct")


def assign_clusters(model: GeoClusterModel, points: np.ndarray) -> np.ndarray:
    d2 = ((np.asarray(points, dtype=np.float64)[:, None, :] - model.centroids[None]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _kmeanspp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, 2), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        probs = d2 / d2.sum()
        centroids[i] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def geo_kmeans(
    points,
    k: int = 20,
    max_iters: int = 100,
    seed: int = 0,
) -> tuple[GeoClusterModel, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding on raw (lat, lon) values.

    Returns (model, labels, objective trace); the trace records the sum of
    squared distances after each assignment step and is non-increasing. An
    emptied cluster keeps its previous centroid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < k:
        raise ContractError(
            f"k={k} exceeds the {distinct.shape[0]} distinct points available"
        )
    rng = stream(seed, "kmeans")
    centroids = _kmeanspp_seed(pts, k, rng)
    labels = np.full(pts.shape[0], -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iters):
        d2 = ((pts[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(pts.shape[0]), new_labels].sum()))
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            if mask.any():
                centroids[c] = pts[mask].mean(axis=0)
    return GeoClusterModel(centroids=centroids, k=k), labels, trace
