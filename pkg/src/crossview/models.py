"""The two trainable architectures and the downstream classification head.

CveMae is the dual-stream model: separate ground and satellite encoders,
a contrastive objective between their class tokens, and masked
reconstruction of the ground image. CvmMae is the single-stream model: both
modalities' patch tokens share one transformer, a feed-forward head scores
ground/satellite pairs as matched or mismatched, and each modality is
reconstructed by its own decoder.

Metadata, when used, is always fused into the post-encoder class-token
embedding (satellite side for CveMae, the joint token for CvmMae), never
into the input tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ShapeError
from .losses import (
    combine_losses,
    info_nce_symmetric,
    make_match_batch,
    matching_loss,
    reconstruction_loss,
)
from .metadata import MetaEmbedder, RawMetadata, batch_meta_embedding
from .rng import RngStreams
from .vit import (
    Block,
    Decoder,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    TokenSequence,
    gather_visible,
    init_parameters,
    patchify,
    random_mask,
    sincos_positions,
    stack_plans,
)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


@dataclass
class ForwardOutput:
    cls_ground: torch.Tensor | None = None
    cls_satellite: torch.Tensor | None = None
    cls_joint: torch.Tensor | None = None
    loss_components: dict[str, torch.Tensor] = field(default_factory=dict)
    reconstructions: dict[str, torch.Tensor] = field(default_factory=dict)


def _as_batch(images, dtype: torch.dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected (B, H, W, C) images, got shape {tuple(x.shape)}")
    return x.to(dtype)


def _mask_batch(seq: TokenSequence, num_patches: int, ratio: float, rng) -> tuple:
    batch = seq.tokens.shape[0]
    plans = [random_mask(num_patches, ratio, rng) for _ in range(batch)]
    vis_idx, masked_idx = stack_plans(plans)
    return gather_visible(seq, vis_idx), masked_idx


class CveMae(nn.Module):
    """Dual-stream contrastive MAE over ground/satellite pairs.

    The satellite encoder is frozen by default (its role is to anchor the
    embedding space); set freeze_satellite=False to train it jointly.
    """

    def __init__(
        self,
        ground: EncoderConfig,
        satellite: EncoderConfig,
        decoder: DecoderConfig,
        use_meta: bool = False,
        freeze_satellite: bool = True,
        temperature: float = 1.0,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if ground.embed_dim != satellite.embed_dim:
            raise ShapeError(
                f"contrastive streams need equal widths, got {ground.embed_dim} and {satellite.embed_dim}"
            )
        self.ground_config = ground
        self.satellite_config = satellite
        self.temperature = temperature
        self.freeze_satellite = freeze_satellite
        self.dtype = dtype
        self.ground_encoder = Encoder(ground, dtype)
        self.satellite_encoder = Encoder(satellite, dtype)
        self.decoder = Decoder(
            ground.embed_dim, (ground.grid, ground.grid), ground.patch_dim, decoder, dtype
        )
        self.meta_embedder = MetaEmbedder(ground.embed_dim, dtype) if use_meta else None
        if freeze_satellite:
            self.satellite_encoder.requires_grad_(False)

    @property
    def arch(self) -> str:
        return "cve-meta" if self.meta_embedder is not None else "cve"

    @property
    def embed_dim(self) -> int:
        return self.ground_config.embed_dim

    def embed_ground(self, images, normalize: bool = True) -> torch.Tensor:
        """Class-token embedding of ground images, unit rows by default."""
        x = _as_batch(images, self.dtype)
        cls = self.ground_encoder(patchify(x, self.ground_config.patch_size)).cls
        return l2_normalize(cls) if normalize else cls

    def embed_satellite(
        self,
        images,
        metas: list[RawMetadata | None] | None = None,
        meta_dropout_p: float = 0.0,
        training: bool = False,
        streams: RngStreams | None = None,
        normalize: bool = True,
    ) -> torch.Tensor:
        x = _as_batch(images, self.dtype)
        cls = self.satellite_encoder(patchify(x, self.satellite_config.patch_size)).cls
        if self.meta_embedder is not None:
            if metas is None:
                metas = [None] * x.shape[0]
            rng = (streams or RngStreams(0)).get("meta_dropout")
            cls = cls + batch_meta_embedding(self.meta_embedder, metas, meta_dropout_p, training, rng)
        return l2_normalize(cls) if normalize else cls

    def forward_pretrain(
        self,
        ground_images,
        satellite_images,
        metas: list[RawMetadata | None] | None = None,
        mask_ratio: float = 0.75,
        meta_dropout_p: float = 0.25,
        streams: RngStreams | None = None,
        training: bool = True,
    ) -> ForwardOutput:
        streams = streams or RngStreams(0)
        ground = _as_batch(ground_images, self.dtype)
        sat = _as_batch(satellite_images, self.dtype)
        if ground.shape[0] < 2:
            raise ShapeError("contrastive objective needs a batch of at least 2 pairs")

        # pass 1, unmasked: contrastive term over fused-then-normalized class tokens
        z_ground = self.embed_ground(ground)
        z_sat = self.embed_satellite(
            sat, metas, meta_dropout_p, training=training, streams=streams
        )
        loss_c = info_nce_symmetric(z_ground, z_sat, self.temperature)

        # pass 2, masked: reconstruct the ground image from its visible patches
        g_seq = patchify(ground, self.ground_config.patch_size)
        visible, masked_idx = _mask_batch(
            g_seq, self.ground_config.num_patches, mask_ratio, streams.get("mask")
        )
        pred = self.decoder(self.ground_encoder(visible))
        loss_r = reconstruction_loss(pred, g_seq.tokens, masked_idx)

        return ForwardOutput(
            cls_ground=z_ground,
            cls_satellite=z_sat,
            loss_components=combine_losses(L_c=loss_c, L_r=loss_r),
            reconstructions={"ground": pred},
        )


class JointEncoder(nn.Module):
    """One transformer over the concatenated ground and satellite patch
    streams, a single class token prepended. Trunk width/depth/heads come
    from the ground config; the satellite config contributes geometry only
    and must agree on embed_dim. Learned per-modality type embeddings
    disambiguate the streams."""

    def __init__(self, ground: EncoderConfig, satellite: EncoderConfig, dtype: torch.dtype):
        super().__init__()
        if ground.embed_dim != satellite.embed_dim:
            raise ShapeError(
                f"joint stream widths differ: {ground.embed_dim} vs {satellite.embed_dim}"
            )
        dim = ground.embed_dim
        self.ground_config = ground
        self.satellite_config = satellite
        self.ground_proj = nn.Linear(ground.patch_dim, dim, dtype=dtype)
        self.satellite_proj = nn.Linear(satellite.patch_dim, dim, dtype=dtype)
        self.register_buffer(
            "pos_ground",
            torch.from_numpy(sincos_positions(dim, ground.grid, ground.grid)).to(dtype),
        )
        self.register_buffer(
            "pos_satellite",
            torch.from_numpy(sincos_positions(dim, satellite.grid, satellite.grid)).to(dtype),
        )
        self.cls_token = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.type_ground = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.type_satellite = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.blocks = nn.ModuleList(
            Block(dim, ground.heads, ground.mlp_ratio, dtype) for _ in range(ground.depth)
        )
        self.norm = nn.LayerNorm(dim, dtype=dtype)

    def forward(
        self, ground_seq: TokenSequence, satellite_seq: TokenSequence
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (cls, ground tokens, satellite tokens), each encoded."""
        xg = self.ground_proj(ground_seq.tokens) + self.pos_ground[ground_seq.positions]
        xs = self.satellite_proj(satellite_seq.tokens) + self.pos_satellite[satellite_seq.positions]
        xg = xg + self.type_ground
        xs = xs + self.type_satellite
        n_ground = xg.shape[1]
        cls = self.cls_token.expand(xg.shape[0], 1, -1)
        x = torch.cat([cls, xg, xs], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1 : 1 + n_ground], x[:, 1 + n_ground :]


class CvmMae(nn.Module):
    """Single-stream cross-view matching MAE with dual-modality reconstruction."""

    def __init__(
        self,
        ground: EncoderConfig,
        satellite: EncoderConfig,
        decoder_ground: DecoderConfig,
        decoder_satellite: DecoderConfig,
        use_meta: bool = False,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.ground_config = ground
        self.satellite_config = satellite
        self.dtype = dtype
        self.encoder = JointEncoder(ground, satellite, dtype)
        dim = ground.embed_dim
        self.decoder_ground = Decoder(
            dim, (ground.grid, ground.grid), ground.patch_dim, decoder_ground, dtype
        )
        self.decoder_satellite = Decoder(
            dim, (satellite.grid, satellite.grid), satellite.patch_dim, decoder_satellite, dtype
        )
        self.match_head = nn.Linear(dim, 1, dtype=dtype)
        self.meta_embedder = MetaEmbedder(dim, dtype) if use_meta else None

    @property
    def arch(self) -> str:
        return "cvm-meta" if self.meta_embedder is not None else "cvm"

    @property
    def embed_dim(self) -> int:
        return self.ground_config.embed_dim

    def _patchify_pair(self, ground_images, satellite_images) -> tuple[TokenSequence, TokenSequence]:
        ground = _as_batch(ground_images, self.dtype)
        sat = _as_batch(satellite_images, self.dtype)
        return (
            patchify(ground, self.ground_config.patch_size),
            patchify(sat, self.satellite_config.patch_size),
        )

    def embed_pair(
        self,
        ground_images,
        satellite_images,
        metas: list[RawMetadata | None] | None = None,
        meta_dropout_p: float = 0.0,
        training: bool = False,
        streams: RngStreams | None = None,
    ) -> torch.Tensor:
        """Joint class-token embedding of full (unmasked) pairs, metadata fused."""
        g_seq, s_seq = self._patchify_pair(ground_images, satellite_images)
        cls, _, _ = self.encoder(g_seq, s_seq)
        if self.meta_embedder is not None:
            if metas is None:
                metas = [None] * cls.shape[0]
            rng = (streams or RngStreams(0)).get("meta_dropout")
            cls = cls + batch_meta_embedding(
                self.meta_embedder, metas, meta_dropout_p, training, rng
            )
        return cls

    def match_logits(self, cls: torch.Tensor) -> torch.Tensor:
        return self.match_head(cls).squeeze(-1)

    def match_probability(self, cls: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.match_logits(cls))

    def forward_pretrain(
        self,
        ground_images,
        satellite_images,
        metas: list[RawMetadata | None] | None = None,
        mask_ratio: float = 0.75,
        meta_dropout_p: float = 0.25,
        streams: RngStreams | None = None,
        training: bool = True,
    ) -> ForwardOutput:
        streams = streams or RngStreams(0)
        g_seq, s_seq = self._patchify_pair(ground_images, satellite_images)
        batch = g_seq.tokens.shape[0]
        if batch < 2:
            raise ShapeError("matching negatives need a batch of at least 2 pairs")
        if metas is None:
            metas = [None] * batch

        # matching pass, unmasked: true pairs plus batch-roll negatives. The
        # rolled rows keep the ground sample's metadata since the record
        # belongs to the observation, not the tile.
        g_tok, s_tok, labels = make_match_batch(g_seq.tokens, s_seq.tokens)
        pos = g_seq.positions
        cls, _, _ = self.encoder(
            TokenSequence(g_tok, pos), TokenSequence(s_tok, s_seq.positions)
        )
        if self.meta_embedder is not None:
            emb = batch_meta_embedding(
                self.meta_embedder, metas, meta_dropout_p, training, streams.get("meta_dropout")
            )
            cls = cls + torch.cat([emb, emb], dim=0)
        logits = self.match_logits(cls)
        loss_m = matching_loss(logits, labels)

        # reconstruction pass: mask both modalities, encode jointly, separate
        # back by modality, decode each with its own decoder.
        mask_rng = streams.get("mask")
        vis_g, masked_g = _mask_batch(g_seq, self.ground_config.num_patches, mask_ratio, mask_rng)
        vis_s, masked_s = _mask_batch(
            s_seq, self.satellite_config.num_patches, mask_ratio, mask_rng
        )
        _, enc_g, enc_s = self.encoder(vis_g, vis_s)
        pred_g = self.decoder_ground(TokenSequence(enc_g, vis_g.positions))
        pred_s = self.decoder_satellite(TokenSequence(enc_s, vis_s.positions))
        loss_r = reconstruction_loss(pred_g, g_seq.tokens, masked_g) + reconstruction_loss(
            pred_s, s_seq.tokens, masked_s
        )

        return ForwardOutput(
            cls_joint=cls[:batch],
            loss_components=combine_losses(L_m=loss_m, L_r=loss_r),
            reconstructions={"ground": pred_g, "satellite": pred_s},
        )


class Classifier(nn.Module):
    """Linear classification head over a backbone's class-token embedding.

    Probe phase freezes the backbone and L2-normalizes the embedding before
    the head; finetune leaves everything trainable and skips normalization.
    The head owns its metadata embedder (seeded from the backbone's when one
    exists) so probing can still fit the metadata pathway.
    """

    def __init__(
        self,
        backbone: CveMae | CvmMae,
        n_classes: int,
        phase: str,
        use_meta: bool = False,
        meta_dropout_p: float = 0.25,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if phase not in ("probe", "finetune"):
            raise ShapeError(f"unknown classification phase {phase!r}")
        if n_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {n_classes}")
        self.backbone = backbone
        self.phase = phase
        self.n_classes = n_classes
        self.meta_dropout_p = meta_dropout_p
        self.head = nn.Linear(backbone.embed_dim, n_classes, dtype=dtype)
        self.meta_embedder = None
        if use_meta:
            self.meta_embedder = MetaEmbedder(backbone.embed_dim, dtype)
            if backbone.meta_embedder is not None:
                with torch.no_grad():
                    self.meta_embedder.weight.copy_(backbone.meta_embedder.weight)
                    self.meta_embedder.bias.copy_(backbone.meta_embedder.bias)
        if phase == "probe":
            self.backbone.requires_grad_(False)

    def embed(self, ground_images, satellite_images=None) -> torch.Tensor:
        """Raw backbone class-token embedding for a batch."""
        if isinstance(self.backbone, CveMae):
            return self.backbone.embed_ground(ground_images, normalize=False)
        if satellite_images is None:
            raise ShapeError("cross-modal backbone classifies (ground, satellite) pairs")
        return self.backbone.embed_pair(ground_images, satellite_images)

    def head_forward(
        self,
        emb: torch.Tensor,
        metas: list[RawMetadata | None] | None = None,
        training: bool = False,
        streams: RngStreams | None = None,
    ) -> torch.Tensor:
        """Head over precomputed raw embeddings; the probe path normalizes
        first so a frozen backbone's embeddings can be cached upstream."""
        if self.phase == "probe":
            emb = l2_normalize(emb)
        if self.meta_embedder is not None:
            if metas is None:
                metas = [None] * emb.shape[0]
            rng = (streams or RngStreams(0)).get("meta_dropout")
            emb = emb + batch_meta_embedding(
                self.meta_embedder, metas, self.meta_dropout_p, training, rng
            )
        return self.head(emb)

    def forward(
        self,
        ground_images,
        satellite_images=None,
        metas: list[RawMetadata | None] | None = None,
        training: bool = False,
        streams: RngStreams | None = None,
    ) -> torch.Tensor:
        return self.head_forward(
            self.embed(ground_images, satellite_images), metas, training, streams
        )


def build_model(
    arch: str,
    ground: EncoderConfig,
    satellite: EncoderConfig,
    decoder: DecoderConfig,
    seed: int,
    freeze_satellite: bool = True,
    temperature: float = 1.0,
    dtype: torch.dtype = torch.float64,
) -> CveMae | CvmMae:
    """Construct and deterministically initialize a pretraining architecture."""
    use_meta = arch.endswith("-meta")
    base = arch.removesuffix("-meta")
    if base == "cve":
        model = CveMae(
            ground, satellite, decoder,
            use_meta=use_meta, freeze_satellite=freeze_satellite,
            temperature=temperature, dtype=dtype,
        )
    elif base == "cvm":
        model = CvmMae(ground, satellite, decoder, decoder, use_meta=use_meta, dtype=dtype)
    else:
        raise ShapeError(f"unknown architecture {arch!r}")
    init_parameters(model, RngStreams(seed).get("init"))
    return model


# toy geometry small enough for finite-difference gradient checks
GRADCHECK_GROUND = EncoderConfig(image_size=32, patch_size=8, embed_dim=16, depth=1, heads=2)
GRADCHECK_SATELLITE = EncoderConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)
GRADCHECK_DECODER = DecoderConfig(dim=8, depth=1, heads=2)

# defaults for desk-scale training on the synthetic corpus
TOY_GROUND = EncoderConfig(image_size=64, patch_size=16, embed_dim=64, depth=4, heads=4)
TOY_SATELLITE = EncoderConfig(image_size=32, patch_size=8, embed_dim=64, depth=4, heads=4)
TOY_DECODER = DecoderConfig(dim=32, depth=2, heads=4)
