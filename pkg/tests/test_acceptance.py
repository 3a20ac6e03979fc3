"""End-to-end acceptance gate.

Each test checks one release criterion and records a PASS/FAIL line that the
terminal summary prints after the run. Heavy trained models come from the
session fixtures in conftest so unit tests and the gate share one build.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

import conftest
from crossview.checkpoint import model_config_dict, save_checkpoint
from crossview.cli import cli
from crossview.geomap import clamp_nonnegative, geo_kmeans, idw_interpolate, make_grid, score_grid
from crossview.losses import info_nce_symmetric, matching_loss
from crossview.metadata import RawMetadata, apply_meta_dropout
from crossview.models import (
    GRADCHECK_DECODER,
    GRADCHECK_GROUND,
    GRADCHECK_SATELLITE,
    build_model,
)
from crossview.retrieval import build_index, hierarchical_retrieve, recall_at_k, unimodal_retrieve
from crossview.rng import RngStreams, stream
from crossview.tiles import tile_bbox
from crossview.vit import EncoderConfig, random_mask

from test_cli import TINY_CONFIG, write_png
from test_geomap import idw_oracle
from test_retrieval import oracle_topk, unit_matrix


@contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        conftest.ACCEPTANCE_LINES.append(f"criterion {number:2d}: FAIL - {description}")
        raise
    conftest.ACCEPTANCE_LINES.append(f"criterion {number:2d}: PASS - {description}")


METAS = [
    RawMetadata(12.0, -70.0, 4),
    RawMetadata(-33.0, 151.0, 11),
    RawMetadata(64.1, -21.9, 1),
    RawMetadata(0.5, 6.6, 7),
]


def pretrain_batch(seed=42, n=4):
    rng = stream(seed, "synth")
    ground = rng.random((n, GRADCHECK_GROUND.image_size, GRADCHECK_GROUND.image_size, 3))
    sat = rng.random((n, GRADCHECK_SATELLITE.image_size, GRADCHECK_SATELLITE.image_size, 3))
    return ground, sat


def test_criterion_01_loss_identities():
    with criterion(1, "closed-form loss values match within 1e-9"):
        started = time.perf_counter()
        e1 = torch.tensor([1.0, 0.0], dtype=torch.float64)
        e2 = torch.tensor([0.0, 1.0], dtype=torch.float64)

        same = torch.stack([e1, e1])
        assert abs(info_nce_symmetric(same, same).item() - math.log(2.0)) < 1e-9

        ortho = torch.stack([e1, e2])
        want = math.log(1.0 + math.exp(-1.0))
        assert abs(info_nce_symmetric(ortho, ortho).item() - want) < 1e-9

        logits = torch.zeros(4, dtype=torch.float64)  # sigmoid -> 0.5 everywhere
        labels = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        assert abs(matching_loss(logits, labels).item() - math.log(2.0)) < 1e-9
        assert time.perf_counter() - started < 1.0


def test_criterion_02_gradient_fidelity():
    with criterion(2, "analytic gradients match central differences on 300 params"):
        started = time.perf_counter()
        ground, sat = pretrain_batch()
        rng = stream(2024, "synth")
        h = 1e-4  # smaller steps drown tiny gradients in cancellation noise
        checked = 0

        for arch, seed in (("cve-meta", 1), ("cvm-meta", 2)):
            model = build_model(
                arch, GRADCHECK_GROUND, GRADCHECK_SATELLITE, GRADCHECK_DECODER,
                seed=seed, freeze_satellite=False,
            )
            assert sum(p.numel() for p in model.parameters()) <= 50_000

            def loss_value():
                out = model.forward_pretrain(
                    ground, sat, metas=METAS, mask_ratio=0.5,
                    meta_dropout_p=0.0, streams=RngStreams(7), training=True,
                )
                return out.loss_components["L_total"]

            model.zero_grad()
            loss_value().backward()
            params = sorted(dict(model.named_parameters()).items())
            grads = {name: p.grad.detach().clone() for name, p in params}

            for _ in range(150):
                name, p = params[int(rng.integers(len(params)))]
                idx = int(rng.integers(p.numel()))
                with torch.no_grad():
                    flat = p.view(-1)
                    orig = flat[idx].item()
                    flat[idx] = orig + h
                    plus = loss_value().item()
                    flat[idx] = orig - h
                    minus = loss_value().item()
                    flat[idx] = orig
                fd = (plus - minus) / (2.0 * h)
                an = grads[name].view(-1)[idx].item()
                rel = abs(fd - an) / max(abs(an), abs(fd), 1e-10)
                assert rel < 1e-3, f"{arch} {name}[{idx}]: fd {fd} vs analytic {an}"
                checked += 1

        assert checked == 300
        assert time.perf_counter() - started < 300.0


def test_criterion_03_masking_invariants():
    with criterion(3, "1000 mask draws: sizes, disjoint/exhaustive, seeded"):
        started = time.perf_counter()
        meta_rng = stream(0, "synth")
        cases = [
            (int(meta_rng.integers(1, 257)), float(meta_rng.uniform(0.0, 0.95)))
            for _ in range(1000)
        ]
        passes = []
        for pass_rng in (stream(1, "mask"), stream(1, "mask")):
            plans = [random_mask(p, ratio, pass_rng) for p, ratio in cases]
            for (p, ratio), plan in zip(cases, plans):
                assert len(plan.masked_idx) == round(ratio * p)
                assert len(plan.visible_idx) == p - round(ratio * p)
                combined = np.concatenate([plan.visible_idx, plan.masked_idx])
                assert np.array_equal(np.sort(combined), np.arange(p))
            passes.append(plans)
        for a, b in zip(*passes):
            assert np.array_equal(a.visible_idx, b.visible_idx)
            assert np.array_equal(a.masked_idx, b.masked_idx)
        assert time.perf_counter() - started < 10.0


def test_criterion_04_meta_dropout():
    with criterion(4, "p=1 forward equals metadata-free; rate 0.25 +/- 0.02"):
        ground, sat = pretrain_batch()
        for arch in ("cve-meta", "cvm-meta"):
            model = build_model(
                arch, GRADCHECK_GROUND, GRADCHECK_SATELLITE, GRADCHECK_DECODER, seed=3
            )
            with torch.no_grad():
                dropped = model.forward_pretrain(
                    ground, sat, metas=METAS, meta_dropout_p=1.0,
                    streams=RngStreams(5), training=True,
                )
                bare = model.forward_pretrain(
                    ground, sat, metas=None, meta_dropout_p=0.0,
                    streams=RngStreams(5), training=True,
                )
            for key, value in dropped.loss_components.items():
                assert abs(value.item() - bare.loss_components[key].item()) <= 1e-12, (arch, key)

        rows = torch.ones((10_000, 8), dtype=torch.float64)
        out = apply_meta_dropout(rows, p=0.25, training=True, rng=stream(0, "meta_dropout"))
        rate = float((out.sum(dim=1) == 0).double().mean())
        assert abs(rate - 0.25) <= 0.02


def test_criterion_05_learning_signal(probe_chain):
    with criterion(5, "pretrained probe beats random-init probe by >= 10 points"):
        trained = probe_chain["probe"].report.accuracy
        control = probe_chain["probe_random"].report.accuracy
        tuned = probe_chain["finetune"].report.accuracy
        assert trained - control >= 0.10, (trained, control)
        assert tuned >= trained - 1e-12, (tuned, trained)
        assert probe_chain["elapsed_s"] < 1800.0


def test_criterion_06_retrieval_correctness():
    with criterion(6, "retrieval equals brute-force oracle on 100 corpora"):
        started = time.perf_counter()
        from crossview.retrieval import EmbeddingIndex

        rng = stream(7, "synth")
        for trial in range(100):
            n = int(rng.integers(2, 501))
            matrix = unit_matrix(rng, n, 8)
            if trial % 3 == 0:
                matrix[n // 2] = matrix[0]  # exact score tie
            ids = [f"obs-{i}" for i in range(n)]
            index = EmbeddingIndex(
                matrix=matrix, ids=ids,
                species=[int(rng.integers(0, 4)) for _ in range(n)], modality="ground",
            )
            query = unit_matrix(rng, 1, 8)[0]
            k = int(rng.integers(1, n + 1))
            result = unimodal_retrieve(query, index, k)
            want_ids, want_scores = oracle_topk(matrix, ids, query, k)
            assert result.ids == want_ids
            assert result.scores == want_scores

            if trial < 10:
                species_of = dict(zip(ids, index.species))
                full = unimodal_retrieve(query, index, n)
                recalls = [recall_at_k([full], [1], species_of, k) for k in range(1, n + 1)]
                assert all(a <= b for a, b in zip(recalls, recalls[1:]))

        cve = build_model("cve", GRADCHECK_GROUND, GRADCHECK_SATELLITE, GRADCHECK_DECODER, seed=1)
        cvm = build_model("cvm", GRADCHECK_GROUND, GRADCHECK_SATELLITE, GRADCHECK_DECODER, seed=2)
        images = rng.random((12, 32, 32, 3))
        index = build_index(images, [f"g{i}" for i in range(12)], [0] * 12, cve, "ground")
        query_sat = rng.random((16, 16, 3))
        with torch.no_grad():
            q_emb = cve.embed_satellite(query_sat[None])[0]
        stage1 = unimodal_retrieve(q_emb, index, k=8)
        reranked = hierarchical_retrieve(query_sat, images, index, cve, cvm, m=8, k=5)
        assert set(reranked.ids) <= set(stage1.ids)
        assert time.perf_counter() - started < 60.0


def test_criterion_07_mapping(aligned_cve):
    with criterion(7, "IDW oracle/nodes/bounds; matched habitat outscores mismatched"):
        started = time.perf_counter()
        rng = stream(8, "synth")
        bbox = (0.0, 0.0, 2.0, 2.0)
        points = [
            (float(rng.uniform(0, 2)), float(rng.uniform(0, 2)), float(rng.uniform(0, 5)))
            for _ in range(9)
        ]
        raster = idw_interpolate(points, bbox, resolution=0.4)
        grid = make_grid(bbox, 0.4)
        assert len(grid.centers) >= 20
        want = idw_oracle(points, grid.centers, 2.0, 1e-12)
        np.testing.assert_allclose(raster.values.reshape(-1), want, atol=1e-9)

        node = idw_interpolate([(0.2, 0.2, 4.0), (1.0, 1.4, 1.0)], bbox, resolution=0.4)
        assert node.values[0, 0] == 4.0

        vals = [p[2] for p in points]
        assert raster.values.min() >= min(vals) - 1e-12
        assert raster.values.max() <= max(vals) + 1e-12
        assert (clamp_nonnegative(np.array([-3.0, -1e-9, 0.2])) >= 0.0).all()

        model, data = aligned_cve["model"], aligned_cve["data"]
        tiles = list(data.satellite[data.labels == 0][:6])
        cell_grid = make_grid((0.0, 0.0, 3.0, 2.0), 1.0)
        rasters = []
        for species in (0, 1):
            query = data.ground[data.labels == species][0]
            scores = score_grid(query, tiles, model)
            pts = [(lat, lon, float(s)) for (lat, lon), s in zip(cell_grid.centers, scores)]
            rasters.append(idw_interpolate(pts, (0.0, 0.0, 3.0, 2.0), resolution=0.5))
        assert rasters[0].values.mean() > rasters[1].values.mean()
        assert time.perf_counter() - started < 60.0


def test_criterion_08_tile_geometry():
    with criterion(8, "equator tile extent exact; area 6.55 km^2 to 3 figures"):
        started = time.perf_counter()
        spec = tile_bbox(0.0, 0.0, span_m=2560.0, pixels=256)
        _, min_lat, _, max_lat = spec.bbox
        dlat = max_lat - min_lat
        assert abs(dlat - 2560.0 / 111320.0) < 1e-6
        assert f"{spec.area_km2:.3g}" == "6.55"
        assert time.perf_counter() - started < 1.0


def test_criterion_09_kmeans():
    with criterion(9, "objective non-increasing over 50 runs; k=n, k=1 exact"):
        started = time.perf_counter()
        base = stream(9, "synth")
        for trial in range(50):
            pts = base.uniform(-40, 40, size=(30, 2))
            _, _, trace = geo_kmeans(pts, k=4, seed=trial)
            assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))

        pts = base.uniform(-40, 40, size=(6, 2))
        model, _, trace = geo_kmeans(pts, k=6, seed=0)
        assert trace[-1] == 0.0
        assert sorted(map(tuple, model.centroids)) == sorted(map(tuple, pts))

        model, labels, _ = geo_kmeans(pts, k=1, seed=0)
        np.testing.assert_allclose(model.centroids[0], pts.mean(axis=0), atol=1e-12)
        assert (labels == 0).all()
        assert time.perf_counter() - started < 10.0


def test_criterion_10_cli_reproducibility(tmp_path, tiny_corpus):
    with criterion(10, "CLI reruns produce bit-identical artifacts"):
        def rerun_identical(args_for, artifacts):
            dirs = [str(tmp_path / f"{artifacts[0]}_{i}") for i in (0, 1)]
            for d in dirs:
                assert cli(args_for(d)) == 0
            for name in artifacts:
                a = open(f"{dirs[0]}/{name}", "rb").read()
                b = open(f"{dirs[1]}/{name}", "rb").read()
                assert a == b, name

        rerun_identical(
            lambda d: ["synth", "--seed", "13", "--pairs", "8", "--species", "2", "--out-dir", d],
            ["train.jsonl", "test.jsonl", "ground/synth-00001.png"],
        )

        config_path = tmp_path / "tiny.cfg"
        config_path.write_text(TINY_CONFIG)
        rerun_identical(
            lambda d: [
                "pretrain", "--manifest", tiny_corpus["train"], "--out-dir", d,
                "--config", str(config_path), "--arch", "cvm", "--seed", "6", "--epochs", "1",
            ],
            ["checkpoint.bin", "losses.csv"],
        )

        rerun_identical(
            lambda d: [
                "cluster", "--manifest", tiny_corpus["train"],
                "--k", "3", "--seed", "1", "--out-dir", d,
            ],
            ["centroids.csv", "labels.csv"],
        )

        ground = EncoderConfig(image_size=64, patch_size=16, embed_dim=16, depth=1, heads=2)
        satellite = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
        cve = build_model("cve", ground, satellite, GRADCHECK_DECODER, seed=0)
        ckpt = str(tmp_path / "cve.bin")
        save_checkpoint(ckpt, cve, arch="cve", phase="pretrain", config=model_config_dict(cve))

        tiles_dir = tmp_path / "tiles"
        tiles_dir.mkdir()
        for i in range(4):
            write_png(str(tiles_dir / f"cell_{i}.png"), 32, seed=i)
        query = str(tmp_path / "query.png")
        write_png(query, 64, seed=9)
        rerun_identical(
            lambda d: [
                "map", "--bbox", "0,0,1,1", "--step", "0.5", "--resolution", "0.5",
                "--query-image", query, "--checkpoint", ckpt,
                "--tiles-dir", str(tiles_dir), "--out-dir", d,
            ],
            ["map.csv", "map.png"],
        )

        rerun_identical(
            lambda d: [
                "retrieve", "--checkpoint", ckpt,
                "--corpus-manifest", tiny_corpus["test"],
                "--query-manifest", tiny_corpus["test"],
                "--k", "3", "--out-dir", d,
            ],
            ["index.bin", "results.csv"],
        )
