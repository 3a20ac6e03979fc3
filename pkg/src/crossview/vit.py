"""ViT plumbing shared by both architectures: patchify/unpatchify, random
masking, fixed 2-D sin-cos positions, pre-norm transformer encoder, and the
mask-token decoder that predicts pixel patches at every position.

Images are channels-last float arrays (H, W, C) or (B, H, W, C); a patch
token is the row-major flattening of its (p, p, C) block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .errors import RangeError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0
    has_cls: bool = True
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ShapeError(f"embed_dim {self.embed_dim} must be divisible by 4 for sin-cos positions")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class DecoderConfig:
    dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeError(f"decoder dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ShapeError(f"decoder dim {self.dim} must be divisible by 4 for sin-cos positions")


@dataclass
class TokenSequence:
    """Patch tokens plus the source-patch index of each token.

    tokens: (P, d) or (B, P, d); positions: (P,) or (B, P) long. When
    has_cls, tokens carry one extra leading row not covered by positions.
    """

    tokens: torch.Tensor
    positions: torch.Tensor
    has_cls: bool = False

    def __post_init__(self):
        n_tok = self.tokens.shape[-2] - (1 if self.has_cls else 0)
        if self.positions.shape[-1] != n_tok:
            raise ShapeError(
                f"{self.positions.shape[-1]} positions for {n_tok} patch tokens"
            )
        pos = self.positions if self.positions.dim() == 2 else self.positions.unsqueeze(0)
        if pos.numel() and (pos.sort(dim=-1).values.diff(dim=-1) <= 0).any():
            raise ShapeError("positions must be distinct within a sequence")

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[..., 1:, :] if self.has_cls else self.tokens

    @property
    def cls(self) -> torch.Tensor:
        if not self.has_cls:
            raise ShapeError("sequence has no class token")
        return self.tokens[..., 0, :]


@dataclass(frozen=True)
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    ratio: float

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def patchify(image: torch.Tensor | np.ndarray, patch_size: int) -> TokenSequence:
    """Split an (..., H, W, C) image into flattened row-major patch tokens."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    h, w = image.shape[-3], image.shape[-2]
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    tokens = rearrange(
        image, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=patch_size, p2=patch_size
    )
    n = tokens.shape[-2]
    return TokenSequence(tokens=tokens, positions=torch.arange(n), has_cls=False)


def unpatchify(tokens: torch.Tensor, image_size: int, patch_size: int, channels: int = 3) -> torch.Tensor:
    """Exact inverse of patchify for full row-major sequences."""
    grid = image_size // patch_size
    expected = patch_size * patch_size * channels
    if tokens.shape[-1] != expected:
        raise ShapeError(f"token length {tokens.shape[-1]} != patch_size^2*C = {expected}")
    if tokens.shape[-2] != grid * grid:
        raise ShapeError(f"got {tokens.shape[-2]} tokens, need {grid * grid} for a full image")
    return rearrange(
        tokens, "... (h w) (p1 p2 c) -> ... (h p1) (w p2) c",
        h=grid, w=grid, p1=patch_size, p2=patch_size,
    )


def random_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random mask of round(ratio*P) patches; deterministic per rng state."""
    if not 0.0 <= ratio < 1.0:
        raise RangeError(f"mask ratio {ratio} outside [0, 1)")
    if num_patches < 1:
        raise RangeError(f"need at least one patch, got {num_patches}")
    n_masked = int(round(ratio * num_patches))
    perm = rng.permutation(num_patches)
    return MaskPlan(
        visible_idx=np.sort(perm[n_masked:]),
        masked_idx=np.sort(perm[:n_masked]),
        ratio=ratio,
    )


def stack_plans(plans: list[MaskPlan]) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, V) visible and (B, M) masked index tensors from per-sample plans."""
    vis = torch.from_numpy(np.stack([p.visible_idx for p in plans])).long()
    masked = torch.from_numpy(np.stack([p.masked_idx for p in plans])).long()
    return vis, masked


def gather_visible(seq: TokenSequence, visible_idx: torch.Tensor) -> TokenSequence:
    """Select per-sample visible tokens from a full (B, P, d) sequence."""
    if seq.has_cls:
        raise ShapeError("gather_visible expects a raw patch sequence")
    tokens = seq.tokens
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0)
    if visible_idx.dim() == 1:
        visible_idx = visible_idx.unsqueeze(0).expand(tokens.shape[0], -1)
    idx = visible_idx.unsqueeze(-1).expand(-1, -1, tokens.shape[-1])
    return TokenSequence(tokens=tokens.gather(1, idx), positions=visible_idx, has_cls=False)


def sincos_positions(embed_dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sin-cos table, (grid_h*grid_w, embed_dim), row-major."""
    if embed_dim % 4 != 0:
        raise ShapeError(f"embed_dim {embed_dim} not divisible by 4")

    def axis(dim: int, pos: np.ndarray) -> np.ndarray:
        omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
        omega = 1.0 / 10000.0 ** omega
        angles = np.einsum("m,d->md", pos, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    ww, hh = np.meshgrid(
        np.arange(grid_w, dtype=np.float64), np.arange(grid_h, dtype=np.float64)
    )
    return np.concatenate(
        [axis(embed_dim // 2, hh.reshape(-1)), axis(embed_dim // 2, ww.reshape(-1))], axis=1
    )


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


TOKEN_PARAMS = ("cls_token", "mask_token", "type_ground", "type_satellite")


def init_parameters(module: nn.Module, rng: np.random.Generator) -> None:
    """Deterministic init: trunc normal (std 0.02) for projections and learned
    tokens, ones for norm scales, zeros for biases. Sorted-name order makes the
    draw sequence independent of module construction order."""
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            leaf = name.rsplit(".", 1)[-1]
            if any(name.endswith(tok) for tok in TOKEN_PARAMS):
                p.copy_(torch.from_numpy(trunc_normal(rng, tuple(p.shape))))
            elif leaf == "bias":
                p.zero_()
            elif leaf == "weight" and p.dim() == 1:
                p.fill_(1.0)
            else:
                p.copy_(torch.from_numpy(trunc_normal(rng, tuple(p.shape))))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, dtype=dtype)
        self.proj = nn.Linear(dim, dim, dtype=dtype)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, dtype: torch.dtype):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=dtype)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Standard pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, dtype: torch.dtype):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, heads, dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    """Patch projection + sin-cos positions + optional class token + blocks.

    A depth-0 stack is the bare projected-and-positioned input: the output
    norm exists to normalize block output, so empty stacks skip it.
    """

    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        self.proj = nn.Linear(config.patch_dim, config.embed_dim, dtype=dtype)
        if config.has_cls:
            self.cls_token = nn.Parameter(torch.zeros(config.embed_dim, dtype=dtype))
        pos = sincos_positions(config.embed_dim, config.grid, config.grid)
        self.register_buffer("pos_embed", torch.from_numpy(pos).to(dtype))
        self.blocks = nn.ModuleList(
            Block(config.embed_dim, config.heads, config.mlp_ratio, dtype)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim, dtype=dtype) if config.depth > 0 else None

    def forward(self, seq: TokenSequence) -> TokenSequence:
        if seq.has_cls:
            raise ShapeError("encoder input must be a raw patch sequence")
        if seq.tokens.shape[-1] != self.config.patch_dim:
            raise ShapeError(
                f"token width {seq.tokens.shape[-1]} != configured patch dim {self.config.patch_dim}"
            )
        tokens = seq.tokens if seq.tokens.dim() == 3 else seq.tokens.unsqueeze(0)
        x = self.proj(tokens) + self.pos_embed[seq.positions]
        if self.config.has_cls:
            cls = self.cls_token.expand(x.shape[0], 1, -1)
            x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        if self.norm is not None:
            x = self.norm(x)
        if seq.tokens.dim() == 2:
            x = x.squeeze(0)
        return TokenSequence(tokens=x, positions=seq.positions, has_cls=self.config.has_cls)


class Decoder(nn.Module):
    """Reconstruction decoder: projects encoded visible tokens, fills masked
    positions with a shared learned mask token, and predicts the pixel patch
    at every position."""

    def __init__(
        self,
        enc_dim: int,
        grid: tuple[int, int],
        patch_dim: int,
        config: DecoderConfig,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.config = config
        self.num_patches = grid[0] * grid[1]
        self.proj = nn.Linear(enc_dim, config.dim, dtype=dtype)
        self.mask_token = nn.Parameter(torch.zeros(config.dim, dtype=dtype))
        pos = sincos_positions(config.dim, grid[0], grid[1])
        self.register_buffer("pos_embed", torch.from_numpy(pos).to(dtype))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio, dtype) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim, dtype=dtype) if config.depth > 0 else None
        self.head = nn.Linear(config.dim, patch_dim, dtype=dtype)

    def forward(self, seq: TokenSequence) -> torch.Tensor:
        """Predict (B, P, patch_dim) pixel patches from encoded visible tokens;
        seq.positions are the visible indices of the mask plan."""
        tokens = seq.tokens if seq.tokens.dim() == 3 else seq.tokens.unsqueeze(0)
        b = tokens.shape[0]
        positions = seq.positions
        if positions.dim() == 1:
            positions = positions.unsqueeze(0).expand(b, -1)
        if positions.numel() and int(positions.max()) >= self.num_patches:
            raise ShapeError(
                f"visible index {int(positions.max())} outside {self.num_patches} patches"
            )
        x = self.proj(tokens)
        cls_part = None
        if seq.has_cls:
            cls_part, x = x[:, :1], x[:, 1:]
        full = self.mask_token.expand(b, self.num_patches, -1).clone()
        idx = positions.unsqueeze(-1).expand(-1, -1, self.config.dim)
        full = full.scatter(1, idx, x)
        full = full + self.pos_embed
        if cls_part is not None:
            full = torch.cat([cls_part, full], dim=1)
        for block in self.blocks:
            full = block(full)
        if self.norm is not None:
            full = self.norm(full)
        pred = self.head(full)
        if cls_part is not None:
            pred = pred[:, 1:]
        if seq.tokens.dim() == 2:
            pred = pred.squeeze(0)
        return pred
