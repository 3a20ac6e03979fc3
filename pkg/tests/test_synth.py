import filecmp
import json

import numpy as np
import pytest

from crossview.errors import RangeError
from crossview.records import load_manifest
from crossview.synth import SynthConfig, load_image, synth_dataset


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(seed=7, n_pairs=20, n_species=4)
    synth_dataset(cfg, str(tmp_path / "a"))
    synth_dataset(cfg, str(tmp_path / "b"))
    for name in ("train.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert filecmp.cmp(tmp_path / "a" / "ground" / "synth-00000.png",
                       tmp_path / "b" / "ground" / "synth-00000.png", shallow=False)
    assert filecmp.cmp(tmp_path / "a" / "satellite" / "synth-00013.png",
                       tmp_path / "b" / "satellite" / "synth-00013.png", shallow=False)


def test_split_counts_and_balance(tmp_path):
    train, test = synth_dataset(SynthConfig(seed=1, n_pairs=100, n_species=10), str(tmp_path))
    assert len(train) + len(test) == 100
    assert len(test) == 20  # every fifth sample of each species at the default fraction
    labels = train.species_ids() + test.species_ids()
    assert sorted(set(labels)) == list(range(10))
    assert set(test.species_ids()) == set(range(10))  # stratified
    counts = np.bincount(labels, minlength=10)
    assert np.all(counts == 10)


def test_manifest_rows_complete_and_loadable(tmp_path):
    synth_dataset(SynthConfig(seed=2, n_pairs=12, n_species=3), str(tmp_path))
    train = load_manifest(str(tmp_path / "train.jsonl"))  # verifies files exist
    row = train.rows[0]
    assert row.id.startswith("synth-")
    assert -88.0 <= row.latitude <= 88.0
    assert -180.0 <= row.longitude <= 180.0
    assert 1 <= row.month <= 12
    with open(tmp_path / "train.jsonl") as fh:
        first = json.loads(fh.readline())
    assert first["split"] == "train"


def test_images_decode_to_unit_range(tmp_path):
    synth_dataset(SynthConfig(seed=3, n_pairs=4, n_species=2,
                              ground_size=32, satellite_size=16), str(tmp_path))
    g = load_image(str(tmp_path / "ground" / "synth-00000.png"))
    s = load_image(str(tmp_path / "satellite" / "synth-00000.png"))
    assert g.shape == (32, 32, 3) and s.shape == (16, 16, 3)
    assert g.dtype == np.float64
    assert g.min() >= 0.0 and g.max() <= 1.0
    assert g.std() > 0.05  # noise + template, not a flat image


def test_habitat_follows_species(tmp_path):
    # default bijection: same species, same habitat cluster -> nearby coordinates
    train, test = synth_dataset(SynthConfig(seed=4, n_pairs=60, n_species=3), str(tmp_path))
    rows = train.rows + test.rows
    by_species = {}
    for row in rows:
        by_species.setdefault(row.species_id, []).append((row.latitude, row.longitude))
    centers = {s: np.mean(pts, axis=0) for s, pts in by_species.items()}
    for s, pts in by_species.items():
        spread = np.abs(np.asarray(pts) - centers[s]).max()
        assert spread < 10.0  # sigma 1.5 cluster
    centroid_gaps = [
        np.abs(centers[a] - centers[b]).max()
        for a in centers for b in centers if a < b
    ]
    assert min(centroid_gaps) > 20.0  # distinct clusters


def test_satellite_pixels_predict_habitat(tmp_path):
    # nearest-centroid on raw satellite pixels must beat chance: the habitat
    # texture is real signal, not noise
    train, test = synth_dataset(SynthConfig(seed=6, n_pairs=120, n_species=4), str(tmp_path))

    def pixels(manifest):
        x = np.stack([
            load_image(str(tmp_path / r.satellite_path)).reshape(-1) for r in manifest.rows
        ])
        y = np.array(manifest.species_ids())
        return x, y

    x_train, y_train = pixels(train)
    x_test, y_test = pixels(test)
    centroids = np.stack([x_train[y_train == c].mean(axis=0) for c in range(4)])
    dists = ((x_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    acc = float((dists.argmin(axis=1) == y_test).mean())
    assert acc > 0.5  # chance is 0.25


def test_config_validation():
    with pytest.raises(RangeError):
        SynthConfig(seed=0, n_pairs=5, n_species=10)
    with pytest.raises(RangeError):
        SynthConfig(seed=0, n_pairs=0, n_species=1)
    with pytest.raises(RangeError):
        SynthConfig(seed=0, n_pairs=10, n_species=2, habitat_count=0)
    assert SynthConfig(seed=0, n_pairs=10, n_species=2).habitats == 2
    assert SynthConfig(seed=0, n_pairs=10, n_species=4, habitat_count=2).habitats == 2


def test_fewer_habitats_than_species(tmp_path):
    train, test = synth_dataset(
        SynthConfig(seed=8, n_pairs=40, n_species=4, habitat_count=2), str(tmp_path)
    )
    rows = train.rows + test.rows
    # habitat = species mod habitats: species 0 and 2 share a cluster
    lat_by_species = {}
    for row in rows:
        lat_by_species.setdefault(row.species_id, []).append(row.latitude)
    mean = {s: np.mean(v) for s, v in lat_by_species.items()}
    assert abs(mean[0] - mean[2]) < 6.0
    assert abs(mean[1] - mean[3]) < 6.0
