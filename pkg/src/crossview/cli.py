"""Command-line entry point.

Every subcommand resolves its configuration as defaults < config file <
explicit flags, runs deterministically under --seed, and writes a
run_manifest.json recording the resolved config, input hashes, and output
paths. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, RangeError
from .geomap import export_map, geo_kmeans, idw_interpolate, make_grid, score_grid
from .metadata import RawMetadata
from .checkpoint import build_classifier, build_pretrain_model, load_checkpoint
from .metrics import compute_metrics
from .records import (
    ObservationRecord,
    Manifest,
    ManifestRow,
    load_manifest,
    minimal_filter,
    parse_month,
    save_manifest,
    write_drop_report,
)
from .retrieval import (
    build_index,
    file_sha256,
    hierarchical_retrieve,
    save_index,
    unimodal_retrieve,
)
from .synth import SynthConfig, load_image, synth_dataset
from .tiles import DEFAULT_PIXELS, DEFAULT_SPAN_M, RequestsClient, fetch_tile, tile_bbox
from .train import (
    PhaseConfig,
    default_phase_config,
    evaluate_classifier,
    load_pairs,
    meta_dropout_sweep,
    run_phase,
)

WMS_ENDPOINT_ENV = "CROSSVIEW_WMS_ENDPOINT"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting the process."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_config_file(path: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {value!r}")


_FIELD_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str}
_PHASE_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PhaseConfig)}


def _typed_overrides(raw: dict[str, str]) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _PHASE_FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        parser = _FIELD_PARSERS.get(_PHASE_FIELD_TYPES[key])
        if parser is None:
            raise ConfigError(f"config key {key!r} is not settable from a config file")
        out[key] = parser(value)
    return out


PHASE_FLAGS = (
    ("seed", int), ("arch", str), ("epochs", int), ("batch_size", int),
    ("base_lr", float), ("weight_decay", float), ("mask_ratio", float),
    ("meta_dropout_p", float), ("n_classes", int),
    ("augment_ground", str), ("augment_satellite", str), ("schedule", str),
)


def _add_phase_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key=value config file; keys mirror PhaseConfig fields")
    for name, typ in PHASE_FLAGS:
        sub.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    sub.add_argument("--use-meta", dest="use_meta", action="store_const", const=True, default=None)


def resolve_phase_config(args, phase: str) -> PhaseConfig:
    overrides: dict = {}
    if getattr(args, "config", None):
        overrides.update(_typed_overrides(parse_config_file(args.config)))
    for name, _ in PHASE_FLAGS + (("use_meta", bool),):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return default_phase_config(phase, **overrides)


def _hash_if_exists(paths: list[str | None]) -> dict[str, str]:
    return {p: file_sha256(p) for p in paths if p and os.path.exists(p)}


def write_run_manifest(
    out_dir: str,
    command: str,
    config: dict,
    seed: int,
    inputs: list[str | None],
    outputs: list[str],
    started: float,
) -> str:
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "input_hashes": _hash_if_exists(inputs),
        "outputs": sorted(outputs),
        "wall_clock_s": time.perf_counter() - started,
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def cmd_synth(args, started: float) -> int:
    config = SynthConfig(
        seed=args.seed, n_pairs=args.pairs, n_species=args.species,
        habitat_count=args.habitats, noise_std=args.noise_std,
        tint_range=args.tint_range, test_fraction=args.test_fraction,
    )
    train, test = synth_dataset(config, args.out_dir)
    outputs = [
        os.path.join(args.out_dir, "train.jsonl"),
        os.path.join(args.out_dir, "test.jsonl"),
    ]
    write_run_manifest(
        args.out_dir, "synth", dataclasses.asdict(config), args.seed, [], outputs, started
    )
    print(f"synth: {len(train)} train / {len(test)} test pairs under {args.out_dir}")
    return 0


def cmd_prepare_data(args, started: float) -> int:
    endpoint = args.wms_endpoint or os.environ.get(WMS_ENDPOINT_ENV)
    if not endpoint:
        raise ConfigError(
            f"no WMS endpoint: pass --wms-endpoint or set {WMS_ENDPOINT_ENV}"
        )
    with open(args.records, encoding="utf-8") as fh:
        records = [ObservationRecord(**json.loads(line)) for line in fh if line.strip()]
    kept, dropped = minimal_filter(records)
    os.makedirs(args.out_dir, exist_ok=True)
    report_path = os.path.join(args.out_dir, "drop_report.csv")
    write_drop_report(report_path, dropped)
    cache_dir = args.cache_dir or os.path.join(args.out_dir, "tiles")
    client = RequestsClient()
    rows = []
    for rec in kept:
        spec = tile_bbox(rec.latitude, rec.longitude, span_m=args.span_m, pixels=args.pixels)
        tile_path = fetch_tile(
            spec, args.layer, endpoint, client, cache_dir, record_id=rec.id
        )
        rows.append(
            ManifestRow(
                id=rec.id,
                ground_path=rec.image_path,
                satellite_path=os.path.abspath(tile_path),
                latitude=rec.latitude,
                longitude=rec.longitude,
                month=parse_month(rec.date),
                species_id=rec.species_id,
            )
        )
    manifest_path = os.path.join(args.out_dir, f"{args.split}.jsonl")
    save_manifest(Manifest(rows=rows, split=args.split), manifest_path)
    write_run_manifest(
        args.out_dir, "prepare-data",
        {"records": args.records, "layer": args.layer, "span_m": args.span_m,
         "pixels": args.pixels, "split": args.split},
        0, [args.records], [manifest_path, report_path], started,
    )
    print(f"prepare-data: kept {len(kept)}, dropped {len(dropped)} -> {manifest_path}")
    return 0


def _phase_command(args, started: float, phase: str) -> int:
    config = resolve_phase_config(args, phase)
    result = run_phase(
        config, args.manifest, args.out_dir,
        test_manifest_path=getattr(args, "test_manifest", None),
        init_checkpoint=getattr(args, "init_checkpoint", None),
    )
    write_run_manifest(
        args.out_dir, phase, dataclasses.asdict(config), config.seed,
        [args.manifest, getattr(args, "test_manifest", None), getattr(args, "init_checkpoint", None), getattr(args, "config", None)],
        [result.checkpoint_path, result.loss_csv_path], started,
    )
    report = result.report
    if phase == "pretrain":
        print(f"{phase}: final L_total {result.final_loss:.6f} -> {result.checkpoint_path}")
    else:
        print(
            f"{phase}: accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f}"
            f" -> {result.checkpoint_path}"
        )
    return 0


def cmd_sweep(args, started: float) -> int:
    pretrain_config = resolve_phase_config(args, "pretrain")
    if not pretrain_config.arch.endswith("-meta"):
        raise ConfigError("sweep-meta-dropout needs a -meta architecture (e.g. --arch cvm-meta)")
    probe_config = default_phase_config(
        "probe", arch=pretrain_config.arch, seed=pretrain_config.seed,
        batch_size=pretrain_config.batch_size, n_classes=args.n_classes,
        epochs=args.probe_epochs, use_meta=True,
    )
    rates = tuple(float(r) for r in args.rates.split(","))
    rows = meta_dropout_sweep(
        pretrain_config, probe_config, args.manifest, args.test_manifest,
        args.out_dir, rates=rates,
    )
    write_run_manifest(
        args.out_dir, "sweep-meta-dropout", dataclasses.asdict(pretrain_config),
        pretrain_config.seed, [args.manifest, args.test_manifest],
        [os.path.join(args.out_dir, "sweep.csv")], started,
    )
    for row in rows:
        print(
            f"rate {row['rate']:.2f}: pretrain loss {row['final_pretrain_loss']:.4f}"
            f" probe acc {row['probe_accuracy']:.4f}"
        )
    return 0


def _load_corpus(manifest_path: str):
    manifest = load_manifest(manifest_path)
    data = load_pairs(manifest_path, manifest)
    return manifest, data


def cmd_retrieve(args, started: float) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.arch.startswith("cve"):
        raise ContractError(
            f"retrieval index needs a dual-stream checkpoint, got {ckpt.arch}"
        )
    model = build_pretrain_model(ckpt)
    _, corpus = _load_corpus(args.corpus_manifest)
    index = build_index(
        corpus.ground, corpus.ids, [int(s) for s in corpus.labels], model,
        modality="ground", checkpoint_hash=file_sha256(args.checkpoint),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    index_path = os.path.join(args.out_dir, "index.bin")
    save_index(index, index_path)

    _, queries = _load_corpus(args.query_manifest)
    cvm_model = None
    if args.cvm_checkpoint:
        cvm_ckpt = load_checkpoint(args.cvm_checkpoint)
        if not cvm_ckpt.arch.startswith("cvm"):
            raise ContractError("--cvm-checkpoint must be a single-stream architecture")
        cvm_model = build_pretrain_model(cvm_ckpt)

    results_path = os.path.join(args.out_dir, "results.csv")
    import csv as _csv

    tmp = results_path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["query_id", "rank", "id", "score"])
        for qi in range(len(queries)):
            if cvm_model is not None:
                result = hierarchical_retrieve(
                    queries.satellite[qi], corpus.ground, index, model, cvm_model,
                    m=min(args.m, len(index)), k=args.k, query_id=queries.ids[qi],
                )
            else:
                emb = model.embed_satellite(queries.satellite[qi][None])[0]
                result = unimodal_retrieve(emb, index, args.k, query_id=queries.ids[qi])
            for rank, (rid, score) in enumerate(zip(result.ids, result.scores), start=1):
                writer.writerow([result.query_id, rank, rid, repr(score)])
    os.replace(tmp, results_path)
    write_run_manifest(
        args.out_dir, "retrieve",
        {"k": args.k, "m": args.m, "checkpoint": args.checkpoint,
         "cvm_checkpoint": args.cvm_checkpoint},
        0, [args.checkpoint, args.cvm_checkpoint, args.corpus_manifest, args.query_manifest],
        [index_path, results_path], started,
    )
    print(f"retrieve: {len(queries)} queries against {len(index)} items -> {results_path}")
    return 0


def cmd_map(args, started: float) -> int:
    bbox = tuple(float(v) for v in args.bbox.split(","))
    if len(bbox) != 4:
        raise RangeError("--bbox expects min_lon,min_lat,max_lon,max_lat")
    grid = make_grid(bbox, args.step)
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.arch.startswith("cve"):
        raise ContractError("mapping scores tiles with a dual-stream checkpoint")
    model = build_pretrain_model(ckpt)

    tiles = []
    if args.tiles_dir:
        for i in range(len(grid.centers)):
            tile_path = os.path.join(args.tiles_dir, f"cell_{i}.png")
            tiles.append(load_image(tile_path) if os.path.exists(tile_path) else None)
    else:
        endpoint = args.wms_endpoint or os.environ.get(WMS_ENDPOINT_ENV)
        if not endpoint:
            raise ConfigError(
                f"no tile source: pass --tiles-dir, --wms-endpoint, or set {WMS_ENDPOINT_ENV}"
            )
        client = RequestsClient()
        cache_dir = args.cache_dir or os.path.join(args.out_dir, "tiles")
        for i, (lat, lon) in enumerate(grid.centers):
            spec = tile_bbox(lat, lon, span_m=args.span_m, pixels=args.pixels)
            path = fetch_tile(spec, args.layer, endpoint, client, cache_dir, record_id=f"cell_{i}")
            tiles.append(load_image(path))

    query = load_image(args.query_image)
    meta = None
    if None not in (args.query_lat, args.query_lon, args.query_month):
        meta = RawMetadata(latitude=args.query_lat, longitude=args.query_lon, month=args.query_month)
    scores = score_grid(query, tiles, model, query_meta=meta)
    points = [(lat, lon, float(s)) for (lat, lon), s in zip(grid.centers, scores)]
    raster = idw_interpolate(points, bbox, resolution=args.resolution, power=args.power)
    os.makedirs(args.out_dir, exist_ok=True)
    out_csv = args.out_csv or os.path.join(args.out_dir, "map.csv")
    out_png = args.out_png or os.path.join(args.out_dir, "map.png")
    export_map(raster, csv_path=out_csv, png_path=out_png)
    write_run_manifest(
        args.out_dir, "map",
        {"bbox": list(bbox), "step": args.step, "resolution": args.resolution,
         "power": args.power, "checkpoint": args.checkpoint},
        0, [args.checkpoint, args.query_image], [out_csv, out_png], started,
    )
    print(f"map: {len(grid.centers)} cells -> {out_csv}, {out_png}")
    return 0


def cmd_cluster(args, started: float) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    points = np.array([(r.latitude, r.longitude) for r in manifest.rows])
    model, labels, trace = geo_kmeans(points, k=args.k, max_iters=args.max_iters, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    centroids_path = os.path.join(args.out_dir, "centroids.csv")
    labels_path = os.path.join(args.out_dir, "labels.csv")
    import csv as _csv

    with open(centroids_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["cluster", "lat", "lon"])
        for c, (lat, lon) in enumerate(model.centroids):
            writer.writerow([c, repr(float(lat)), repr(float(lon))])
    with open(labels_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["id", "cluster"])
        for row, label in zip(manifest.rows, labels):
            writer.writerow([row.id, int(label)])
    write_run_manifest(
        args.out_dir, "cluster", {"k": args.k, "max_iters": args.max_iters},
        args.seed, [args.manifest], [centroids_path, labels_path], started,
    )
    print(f"cluster: k={args.k}, final objective {trace[-1]:.6f} -> {centroids_path}")
    return 0


def cmd_eval(args, started: float) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.phase not in ("probe", "finetune"):
        raise ContractError(f"eval needs a classifier checkpoint, got phase {ckpt.phase!r}")
    clf = build_classifier(ckpt)
    data = load_pairs(args.manifest)
    preds = evaluate_classifier(clf, data, batch_size=args.batch_size, use_meta=clf.meta_embedder is not None)
    report = compute_metrics(preds, data.labels, clf.n_classes)
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, "metrics.json")
    tmp = metrics_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, metrics_path)
    write_run_manifest(
        args.out_dir, "eval", {"checkpoint": args.checkpoint}, 0,
        [args.checkpoint, args.manifest], [metrics_path], started,
    )
    print(f"eval: accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f} -> {metrics_path}")
    return 0


def build_parser() -> Parser:
    parser = Parser(
        prog="crossview",
        description="Cross-view pretraining, probing, retrieval, and distribution mapping.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = subs.add_parser("synth", help="generate a synthetic cross-view dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--species", type=int, default=10)
    p.add_argument("--habitats", type=int, default=None)
    p.add_argument("--noise-std", type=float, default=0.25)
    p.add_argument("--tint-range", type=float, default=0.2)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_synth)

    p = subs.add_parser("prepare-data", help="filter records and fetch satellite tiles")
    p.add_argument("--records", required=True, help="JSONL of observation records")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--wms-endpoint", default=None)
    p.add_argument("--layer", default="s2cloudless-2020_3857")
    p.add_argument("--span-m", type=float, default=DEFAULT_SPAN_M)
    p.add_argument("--pixels", type=int, default=DEFAULT_PIXELS)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--split", default="train")
    p.set_defaults(handler=cmd_prepare_data)

    for phase in ("pretrain", "probe", "finetune"):
        p = subs.add_parser(phase, help=f"run the {phase} phase")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--test-manifest", default=None)
        p.add_argument("--init-checkpoint", default=None)
        _add_phase_flags(p)
        p.set_defaults(handler=lambda a, s, _phase=phase: _phase_command(a, s, _phase))

    p = subs.add_parser("sweep-meta-dropout", help="meta-dropout rate ablation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rates", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--probe-epochs", type=int, default=30)
    _add_phase_flags(p)
    p.set_defaults(handler=cmd_sweep)

    p = subs.add_parser("retrieve", help="satellite-to-ground retrieval")
    p.add_argument("--checkpoint", required=True, help="dual-stream checkpoint")
    p.add_argument("--cvm-checkpoint", default=None, help="re-rank with this single-stream checkpoint")
    p.add_argument("--corpus-manifest", required=True)
    p.add_argument("--query-manifest", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_retrieve)

    p = subs.add_parser("map", help="species distribution raster for a query image")
    p.add_argument("--bbox", required=True, help="min_lon,min_lat,max_lon,max_lat")
    p.add_argument("--step", type=float, required=True, help="grid step, degrees")
    p.add_argument("--resolution", type=float, default=0.01)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--query-image", required=True)
    p.add_argument("--query-lat", type=float, default=None)
    p.add_argument("--query-lon", type=float, default=None)
    p.add_argument("--query-month", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tiles-dir", default=None, help="directory of cell_<i>.png tiles")
    p.add_argument("--wms-endpoint", default=None)
    p.add_argument("--layer", default="s2cloudless-2020_3857")
    p.add_argument("--span-m", type=float, default=DEFAULT_SPAN_M)
    p.add_argument("--pixels", type=int, default=DEFAULT_PIXELS)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-png", default=None)
    p.set_defaults(handler=cmd_map)

    p = subs.add_parser("cluster", help="KMeans geo-clustering of manifest coordinates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_cluster)

    p = subs.add_parser("eval", help="score a classifier checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_eval)

    return parser


def cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    import torch

    torch.set_num_threads(1)
    started = time.perf_counter()
    try:
        return args.handler(args, started)
    except Exception as exc:  # runtime failures map to exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(cli(sys.argv[1:]))
