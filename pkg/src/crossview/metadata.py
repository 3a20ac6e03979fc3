"""Sin-cos metadata encoding, linear embedding, meta-dropout, and fusion
into class-token embeddings.

Latitude, longitude, and month are mapped onto the unit circle:

    lon   -> (sin(pi*lon/180), cos(pi*lon/180))
    lat   -> (sin(pi*lat/90),  cos(pi*lat/90))
    month -> (sin(pi*month/12), cos(pi*month/12))

and concatenated as [sin_lon, cos_lon, sin_lat, cos_lat, sin_month, cos_month].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import RangeError, ShapeError

META_FEATURE_DIM = 6


@dataclass(frozen=True)
class RawMetadata:
    """One observation's location and capture month (1 = January)."""

    latitude: float
    longitude: float
    month: int

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise RangeError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise RangeError(f"longitude {self.longitude} outside [-180, 180]")
        if not 1 <= int(self.month) <= 12:
            raise RangeError(f"month {self.month} outside [1, 12]")


def encode_metadata(meta: RawMetadata) -> np.ndarray:
    """Periodic 6-feature encoding of one record, float64."""
    lon = math.pi * meta.longitude / 180.0
    lat = math.pi * meta.latitude / 90.0
    mon = math.pi * meta.month / 12.0
    return np.array(
        [
            math.sin(lon), math.cos(lon),
            math.sin(lat), math.cos(lat),
            math.sin(mon), math.cos(mon),
        ],
        dtype=np.float64,
    )


def encode_metadata_batch(metas: list[RawMetadata | None]) -> np.ndarray:
    """Stacked encoding; a None entry encodes to the zero row (metadata absent)."""
    out = np.zeros((len(metas), META_FEATURE_DIM), dtype=np.float64)
    for i, m in enumerate(metas):
        if m is not None:
            out[i] = encode_metadata(m)
    return out


def embed_metadata(feat: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map of 6-features to the model width: feat @ weight + bias.

    weight is (6, d), bias (d,). feat may be (6,) or (N, 6).
    """
    if feat.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"feature width {feat.shape[-1]} does not match weight rows {weight.shape[0]}"
        )
    if weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"weight columns {weight.shape[1]} do not match bias length {bias.shape[0]}"
        )
    return feat @ weight + bias


class MetaEmbedder(torch.nn.Module):
    """Linear layer embedding the 6 periodic features to the encoder width."""

    def __init__(self, dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.zeros(META_FEATURE_DIM, dim, dtype=dtype))
        self.bias = torch.nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return embed_metadata(feat, self.weight, self.bias)


def apply_meta_dropout(
    embedding: torch.Tensor,
    p: float,
    training: bool,
    rng: np.random.Generator,
    present: bool | np.ndarray = True,
) -> torch.Tensor:
    """Zero the metadata embedding with probability p during training.

    `embedding` is (d,) or (N, d); one Bernoulli draw per row. In eval mode
    rows are passed through unchanged when metadata is present and zeroed
    when absent, which makes a missing record indistinguishable from a
    dropout hit.
    """
    if not 0.0 <= p <= 1.0:
        raise RangeError(f"meta-dropout probability {p} outside [0, 1]")
    single = embedding.dim() == 1
    rows = 1 if single else embedding.shape[0]
    if training:
        keep = rng.random(rows) >= p
    else:
        keep = np.broadcast_to(np.asarray(present, dtype=bool), (rows,))
    # broadcast_to hands back a read-only view; torch wants writable memory
    keep_t = torch.from_numpy(keep.astype(bool, copy=True)).to(embedding.device)
    if single:
        return embedding if bool(keep_t[0]) else torch.zeros_like(embedding)
    return embedding * keep_t.unsqueeze(1).to(embedding.dtype)


def fuse_metadata(cls_embedding: torch.Tensor, meta_embedding: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the class-token and metadata embeddings."""
    if cls_embedding.shape != meta_embedding.shape:
        raise ShapeError(
            f"class embedding shape {tuple(cls_embedding.shape)} != "
            f"metadata embedding shape {tuple(meta_embedding.shape)}"
        )
    return cls_embedding + meta_embedding


def batch_meta_embedding(
    embedder: MetaEmbedder,
    metas: list[RawMetadata | None],
    p: float,
    training: bool,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Embed a batch of optional records with meta-dropout applied.

    Absent records produce exact-zero rows (the embedder bias never leaks
    through), and the dropout stream is advanced one draw per row regardless
    of presence so toggling metadata cannot shift later draws.
    """
    feats = torch.from_numpy(encode_metadata_batch(metas)).to(embedder.weight.dtype)
    emb = embedder(feats)
    present = np.array([m is not None for m in metas], dtype=bool)
    emb = emb * torch.from_numpy(present).to(emb.dtype).unsqueeze(1)
    return apply_meta_dropout(emb, p, training, rng, present=present)
