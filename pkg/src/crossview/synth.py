"""Deterministic synthetic cross-view corpus.

Each species owns a low-frequency ground-image template and is assigned a
habitat; each habitat owns a satellite texture template, a spatial cluster
of geolocations, and each species a seasonal month window. Per-sample
nuisance (global tint and pixel noise) dominates raw pixel variance, so a
classifier has to pick up the template structure rather than trivial
statistics. By default habitat_count equals n_species, making the
ground/satellite correspondence carry species-level signal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import RangeError
from .records import Manifest, ManifestRow, save_manifest
from .rng import RngStreams


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    n_pairs: int
    n_species: int
    habitat_count: int | None = None
    ground_size: int = 64
    satellite_size: int = 32
    noise_std: float = 0.25
    tint_range: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_species < 1 or self.n_pairs < 1:
            raise RangeError("n_pairs and n_species must be positive")
        if self.n_species > self.n_pairs:
            raise RangeError(
                f"n_species {self.n_species} exceeds n_pairs {self.n_pairs}"
            )
        if self.habitat_count is not None and self.habitat_count < 1:
            raise RangeError("habitat_count must be positive")

    @property
    def habitats(self) -> int:
        return self.habitat_count if self.habitat_count is not None else self.n_species


def _template(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Low-frequency random field: a cells x cells lattice upsampled to size."""
    base = rng.uniform(0.15, 0.85, size=(cells, cells, 3))
    factor = size // cells
    return np.repeat(np.repeat(base, factor, axis=0), factor, axis=1)


def _save_png(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_image(path: str) -> np.ndarray:
    """PNG/JPEG to float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def synth_dataset(config: SynthConfig, out_dir: str) -> tuple[Manifest, Manifest]:
    """Generate images plus train/test manifests under out_dir.

    Sample i gets species i mod n_species, so every species is present and
    balanced; the test split takes every fifth sample of each species
    (per-species counters keep it stratified).
    """
    rng = RngStreams(config.seed).get("synth")
    ground_dir = os.path.join(out_dir, "ground")
    sat_dir = os.path.join(out_dir, "satellite")
    os.makedirs(ground_dir, exist_ok=True)
    os.makedirs(sat_dir, exist_ok=True)

    species_templates = [
        _template(rng, config.ground_size, cells=8) for _ in range(config.n_species)
    ]
    habitat_templates = [
        _template(rng, config.satellite_size, cells=4) for _ in range(config.habitats)
    ]
    # habitat cluster centers spread over the globe, away from the poles
    habitat_lon = np.array(
        [-160.0 + 320.0 * h / max(1, config.habitats) for h in range(config.habitats)]
    )
    habitat_lat = np.array(
        [-55.0 + 110.0 * ((h * 7) % config.habitats) / max(1, config.habitats) for h in range(config.habitats)]
    )

    rows_train: list[ManifestRow] = []
    rows_test: list[ManifestRow] = []
    per_species_count = [0] * config.n_species
    test_stride = max(2, int(round(1.0 / config.test_fraction))) if config.test_fraction > 0 else 0

    for i in range(config.n_pairs):
        species = i % config.n_species
        habitat = species % config.habitats

        tint_g = rng.uniform(-config.tint_range, config.tint_range, size=3)
        ground = species_templates[species] + tint_g + rng.normal(
            0.0, config.noise_std, size=(config.ground_size, config.ground_size, 3)
        )
        tint_s = rng.uniform(-config.tint_range, config.tint_range, size=3)
        sat = habitat_templates[habitat] + tint_s + rng.normal(
            0.0, config.noise_std, size=(config.satellite_size, config.satellite_size, 3)
        )

        lat = float(np.clip(habitat_lat[habitat] + rng.normal(0.0, 1.5), -88.0, 88.0))
        lon = float(np.clip(habitat_lon[habitat] + rng.normal(0.0, 1.5), -179.9, 179.9))
        peak = (species % 12) + 1
        month = int((peak - 1 + rng.integers(-1, 2)) % 12) + 1

        rid = f"synth-{i:05d}"
        ground_path = os.path.join("ground", f"{rid}.png")
        sat_path = os.path.join("satellite", f"{rid}.png")
        _save_png(os.path.join(out_dir, ground_path), np.clip(ground, 0.0, 1.0))
        _save_png(os.path.join(out_dir, sat_path), np.clip(sat, 0.0, 1.0))

        row = ManifestRow(
            id=rid,
            ground_path=ground_path,
            satellite_path=sat_path,
            latitude=lat,
            longitude=lon,
            month=month,
            species_id=species,
        )
        k = per_species_count[species]
        per_species_count[species] += 1
        if test_stride and k % test_stride == test_stride - 1:
            rows_test.append(row)
        else:
            rows_train.append(row)

    train = Manifest(rows=rows_train, split="train")
    test = Manifest(rows=rows_test, split="test")
    save_manifest(train, os.path.join(out_dir, "train.jsonl"))
    save_manifest(test, os.path.join(out_dir, "test.jsonl"))
    return train, test
