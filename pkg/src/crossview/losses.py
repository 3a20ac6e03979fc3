"""Training objectives: symmetric InfoNCE over paired embeddings, masked
patch reconstruction, and the paired/unpaired matching objective with its
batch-roll negative construction."""

from __future__ import annotations

import torch

from .errors import ContractError, NumericError, RangeError, ShapeError

MATCH_EPS = 1e-7


def _check_paired(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"expected (N, d) embeddings, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < 2:
        raise ShapeError("contrastive batch needs at least 2 pairs")


def info_nce_symmetric(
    emb_a: torch.Tensor, emb_b: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Symmetric cross-entropy over the pairwise similarity matrix, with the
    diagonal as positives. Inputs must be row-normalized; temperature divides
    the similarities."""
    _check_paired(emb_a, emb_b)
    if temperature <= 0.0:
        raise RangeError(f"temperature must be positive, got {temperature}")
    norms_a = emb_a.norm(dim=-1)
    norms_b = emb_b.norm(dim=-1)
    if not bool(
        torch.allclose(norms_a, torch.ones_like(norms_a), atol=1e-6)
        and torch.allclose(norms_b, torch.ones_like(norms_b), atol=1e-6)
    ):
        raise RangeError("InfoNCE inputs must be unit-normalized rows")
    logits = emb_a @ emb_b.T / temperature
    targets = torch.arange(emb_a.shape[0], device=emb_a.device)
    loss_ab = torch.nn.functional.cross_entropy(logits, targets)
    loss_ba = torch.nn.functional.cross_entropy(logits.T, targets)
    return 0.5 * (loss_ab + loss_ba)


def reconstruction_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    masked_idx: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error per pixel. With masked_idx, only those patch rows
    count; without, every patch counts. Zero masked patches is a contract
    violation rather than a silent zero."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if masked_idx is None:
        return ((pred - target) ** 2).mean()
    if masked_idx.dim() == 1:
        masked_idx = masked_idx.unsqueeze(0).expand(pred.shape[0], -1)
    if masked_idx.shape[-1] == 0:
        raise ShapeError("no masked patches to score")
    idx = masked_idx.unsqueeze(-1).expand(-1, -1, pred.shape[-1])
    diff = pred.gather(1, idx) - target.gather(1, idx)
    return (diff ** 2).mean()


def make_match_batch(
    ground: torch.Tensor, satellite: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Paired positives plus one-step batch-roll negatives.

    Returns (ground_2n, satellite_2n, labels) where the first N rows are the
    true pairs and the last N pair each ground row with the next sample's
    satellite row. Needs N >= 2; with a single pair the roll is the identity.
    """
    if ground.shape[0] != satellite.shape[0]:
        raise ShapeError(
            f"batch sizes differ: {ground.shape[0]} ground vs {satellite.shape[0]} satellite"
        )
    n = ground.shape[0]
    if n < 2:
        raise ShapeError("matching negatives need a batch of at least 2 pairs")
    rolled = torch.roll(satellite, shifts=-1, dims=0)
    ground_all = torch.cat([ground, ground], dim=0)
    sat_all = torch.cat([satellite, rolled], dim=0)
    labels = torch.cat(
        [torch.ones(n, dtype=ground.dtype), torch.zeros(n, dtype=ground.dtype)]
    )
    return ground_all, sat_all, labels


def matching_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on sigmoid(logits), probabilities clamped to
    [eps, 1-eps] so extreme logits stay finite."""
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    if not bool(((labels == 0.0) | (labels == 1.0)).all()):
        raise ContractError("matching labels must be 0 or 1")
    prob = torch.sigmoid(logits).clamp(MATCH_EPS, 1.0 - MATCH_EPS)
    return -(labels * prob.log() + (1.0 - labels) * (1.0 - prob).log()).mean()


def combine_losses(**parts: torch.Tensor) -> dict[str, torch.Tensor]:
    """Named loss terms plus their unweighted sum under "L_total"."""
    if not parts:
        raise ShapeError("no loss terms to combine")
    for name, value in parts.items():
        if not bool(torch.isfinite(value).all()):
            raise NumericError(f"loss term {name} is not finite")
    out = dict(parts)
    out["L_total"] = sum(parts.values())
    return out
