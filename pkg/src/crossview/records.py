"""Observation-record ingestion: the minimal metadata filter and the JSONL
manifest format that ties ground images, satellite tiles, and metadata
together for training."""

from __future__ import annotations

import csv
import datetime
import json
import os
from dataclasses import dataclass, field

from .errors import ContractError, RangeError


@dataclass
class ObservationRecord:
    id: str
    image_path: str
    species_id: int
    latitude: float | None = None
    longitude: float | None = None
    date: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.species_id < 0:
            raise RangeError(f"record {self.id}: species_id {self.species_id} < 0")
        if self.latitude is not None and self.longitude is None:
            raise ContractError(f"record {self.id}: latitude without longitude")


def parse_month(date_string: str) -> int:
    """Capture month from an ISO date or datetime string, 1..12."""
    return datetime.date.fromisoformat(date_string[:10]).month


def minimal_filter(
    records: list[ObservationRecord],
) -> tuple[list[ObservationRecord], list[tuple[str, str]]]:
    """Drop only records unusable for cross-view training: missing
    geolocation or missing/unparseable capture date. Everything else is kept
    untouched. Returns (kept, [(id, reason), ...])."""
    kept = []
    dropped = []
    for rec in records:
        if rec.latitude is None or rec.longitude is None:
            dropped.append((rec.id, "missing geolocation"))
            continue
        if rec.date is None:
            dropped.append((rec.id, "missing timestamp"))
            continue
        try:
            parse_month(rec.date)
        except ValueError:
            dropped.append((rec.id, "unparseable timestamp"))
            continue
        kept.append(rec)
    return kept, dropped


def write_drop_report(path: str, dropped: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "reason"])
        writer.writerows(dropped)


MANIFEST_FIELDS = ("id", "ground_path", "satellite_path", "latitude", "longitude", "month", "species_id")


@dataclass
class ManifestRow:
    id: str
    ground_path: str
    satellite_path: str
    latitude: float
    longitude: float
    month: int
    species_id: int


@dataclass
class Manifest:
    rows: list[ManifestRow]
    split: str = "train"

    def __post_init__(self):
        ids = [r.id for r in self.rows]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ContractError(f"duplicate manifest ids: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.rows)

    def species_ids(self) -> list[int]:
        return [r.species_id for r in self.rows]


def save_manifest(manifest: Manifest, path: str) -> None:
    """One sorted-key JSON object per line; atomic replace on completion."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in manifest.rows:
            payload = {k: getattr(row, k) for k in MANIFEST_FIELDS}
            payload["split"] = manifest.split
            fh.write(json.dumps(payload, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str, check_files: bool = True) -> Manifest:
    rows = []
    split = "train"
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            split = obj.pop("split", split)
            try:
                rows.append(ManifestRow(**{k: obj[k] for k in MANIFEST_FIELDS}))
            except KeyError as exc:
                raise ContractError(f"{path}:{line_no}: missing manifest field {exc}") from exc
    manifest = Manifest(rows=rows, split=split)
    if check_files:
        base = os.path.dirname(os.path.abspath(path))
        for row in manifest.rows:
            for p in (row.ground_path, row.satellite_path):
                full = p if os.path.isabs(p) else os.path.join(base, p)
                if not os.path.exists(full):
                    raise ContractError(f"manifest references missing file {p}")
    return manifest


def resolve_path(manifest_path: str, file_path: str) -> str:
    """Manifest-relative paths resolve against the manifest's directory."""
    if os.path.isabs(file_path):
        return file_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), file_path)
