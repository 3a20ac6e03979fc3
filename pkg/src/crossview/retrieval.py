"""Embedding index construction, exact top-k retrieval, hierarchical
cross-modal re-ranking, and species-level recall.

Scores are cosine similarities (dot products over unit rows). All ties
break by ascending id so rankings are deterministic across platforms.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, RangeError
from .models import CveMae, CvmMae

INDEX_MAGIC = b"CVIDX001"
MODALITIES = ("ground", "satellite")


@dataclass
class EmbeddingIndex:
    matrix: np.ndarray
    ids: list[str]
    species: list[int]
    modality: str
    checkpoint_hash: str = ""

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise ContractError(f"index matrix must be 2-D, got {self.matrix.shape}")
        n = self.matrix.shape[0]
        if not (len(self.ids) == len(self.species) == n):
            raise ContractError("index id/species tables misaligned with matrix")
        if len(set(self.ids)) != n:
            raise ContractError("index ids must be distinct")
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")
        if n:
            norms = np.linalg.norm(self.matrix, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ContractError("index rows must be unit-normalized (tolerance 1e-6)")

    def __len__(self) -> int:
        return self.matrix.shape[0]


@dataclass
class RetrievalResult:
    query_id: str
    ids: list[str]
    scores: list[float]

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise ContractError("ranked ids and scores misaligned")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ContractError("scores must be sorted descending")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("ranked ids must be distinct")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_index(
    images,
    ids: list[str],
    species: list[int],
    model,
    modality: str,
    metas=None,
    batch_size: int = 32,
    checkpoint_hash: str = "",
) -> EmbeddingIndex:
    """Normalized class-token embeddings for a corpus, batch by batch.

    Uni-modal embeddings only exist for the dual-stream architecture; the
    single-stream model never sees one modality alone, so it is rejected.
    """
    if isinstance(model, CvmMae) or not isinstance(model, CveMae):
        raise ContractError(
            f"uni-modal index needs a dual-stream model, got {type(model).__name__}"
        )
    if modality not in MODALITIES:
        raise ContractError(f"unknown modality {modality!r}")
    images = np.asarray(images)
    rows = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start : start + batch_size]
            if modality == "ground":
                emb = model.embed_ground(batch)
            else:
                batch_metas = metas[start : start + batch_size] if metas else None
                emb = model.embed_satellite(batch, batch_metas)
            rows.append(emb.numpy())
    matrix = np.concatenate(rows) if rows else np.zeros((0, model.embed_dim))
    return EmbeddingIndex(
        matrix=matrix, ids=list(ids), species=list(species),
        modality=modality, checkpoint_hash=checkpoint_hash,
    )


def _rank(scores: np.ndarray, ids: list[str]) -> np.ndarray:
    """Indices sorted by descending score, ascending id on ties."""
    return np.lexsort((np.array(ids), -scores))


def unimodal_retrieve(query_embedding, index: EmbeddingIndex, k: int, query_id: str = "query") -> RetrievalResult:
    if k > len(index):
        raise RangeError(f"k={k} exceeds corpus size {len(index)}")
    if k < 1:
        raise RangeError("k must be >= 1")
    q = np.asarray(
        query_embedding.detach().numpy() if isinstance(query_embedding, torch.Tensor) else query_embedding,
        dtype=np.float64,
    ).reshape(-1)
    scores = index.matrix @ q
    order = _rank(scores, index.ids)[:k]
    return RetrievalResult(
        query_id=query_id,
        ids=[index.ids[i] for i in order],
        scores=[float(scores[i]) for i in order],
    )


def hierarchical_retrieve(
    query_satellite_image,
    ground_images,
    index: EmbeddingIndex,
    cve_model: CveMae,
    cvm_model: CvmMae,
    m: int,
    k: int,
    query_id: str = "query",
    query_meta=None,
    batch_size: int = 32,
) -> RetrievalResult:
    """Two-stage satellite-to-ground retrieval.

    Stage 1 shortlists the top-m ground images by embedding similarity to
    the query satellite tile; stage 2 re-ranks the shortlist by the
    single-stream model's matching probability for each (candidate ground,
    query satellite) pair, breaking probability ties by the stage-1 score.
    ground_images rows must align with the index rows.
    """
    if k > m:
        raise RangeError(f"k={k} exceeds candidate count m={m}")
    if index.modality != "ground":
        raise ContractError("hierarchical retrieval shortlists from a ground index")
    ground_images = np.asarray(ground_images)
    if ground_images.shape[0] != len(index):
        raise ContractError("ground corpus images misaligned with index rows")

    with torch.no_grad():
        query_emb = cve_model.embed_satellite(
            query_satellite_image[None], [query_meta] if query_meta is not None else None
        )[0]
    stage1 = unimodal_retrieve(query_emb, index, m, query_id=query_id)
    row_of = {rid: i for i, rid in enumerate(index.ids)}
    candidate_rows = [row_of[rid] for rid in stage1.ids]

    sat = np.asarray(query_satellite_image)
    probs = []
    with torch.no_grad():
        for start in range(0, len(candidate_rows), batch_size):
            rows = candidate_rows[start : start + batch_size]
            grounds = ground_images[rows]
            sats = np.broadcast_to(sat, (len(rows),) + sat.shape).copy()
            metas = [query_meta] * len(rows) if query_meta is not None else None
            cls = cvm_model.embed_pair(grounds, sats, metas)
            probs.extend(cvm_model.match_probability(cls).numpy().tolist())
    probs_arr = np.array(probs)
    stage1_scores = np.array(stage1.scores)
    # ties by stage-1 score, then id, all descending-score semantics
    order = np.lexsort((np.array(stage1.ids), -stage1_scores, -probs_arr))[:k]
    return RetrievalResult(
        query_id=query_id,
        ids=[stage1.ids[i] for i in order],
        scores=[float(probs_arr[i]) for i in order],
    )


def recall_at_k(
    results: list[RetrievalResult],
    query_species: list[int],
    corpus_species: dict[str, int],
    k: int,
) -> float:
    """Fraction of queries whose top-k contains at least one item of the
    query's species; averaged per query."""
    if len(results) != len(query_species):
        raise ContractError("results and query species misaligned")
    if not results:
        raise ContractError("no queries to score")
    hits = 0
    for result, species in zip(results, query_species):
        if k > len(result.ids):
            raise RangeError(f"k={k} exceeds ranked length {len(result.ids)}")
        if any(corpus_species[rid] == species for rid in result.ids[:k]):
            hits += 1
    return hits / len(results)


def save_index(index: EmbeddingIndex, path: str) -> None:
    """Header JSON + row-major float32 matrix + id/species tables, atomic."""
    header = {
        "count": len(index),
        "dim": int(index.matrix.shape[1]),
        "modality": index.modality,
        "checkpoint_hash": index.checkpoint_hash,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tables = json.dumps(
        {"ids": index.ids, "species": index.species}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    matrix = np.ascontiguousarray(index.matrix.astype("<f4"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(matrix.tobytes())
        fh.write(tables)
    os.replace(tmp, path)


def load_index(path: str) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise ContractError(f"{path}: not an index file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        matrix_bytes = header["count"] * header["dim"] * 4
        matrix = np.frombuffer(fh.read(matrix_bytes), dtype="<f4").reshape(
            header["count"], header["dim"]
        )
        tables = json.loads(fh.read().decode("utf-8"))
    return EmbeddingIndex(
        matrix=matrix.astype(np.float64),
        ids=tables["ids"],
        species=tables["species"],
        modality=header["modality"],
        checkpoint_hash=header["checkpoint_hash"],
    )
