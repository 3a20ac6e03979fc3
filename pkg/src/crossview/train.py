"""Optimization harness: cosine schedule, hand-rolled decoupled-weight-decay
Adam, the three training phases (pretrain, linear probe, finetune), and the
meta-dropout ablation sweep.

The reference loop is single-threaded and bit-deterministic under a fixed
seed: batch order, masking, meta-dropout, and augmentation each draw from
their own named stream, and parameter updates are plain float64 tensor ops.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .augment import apply_policy, get_policy, smooth_labels
from .checkpoint import (
    build_classifier,
    build_pretrain_model,
    load_checkpoint,
    model_config_dict,
    save_checkpoint,
)
from .errors import ConfigError, ContractError, NumericError, RangeError
from .metadata import RawMetadata
from .metrics import MetricReport, compute_metrics
from .models import Classifier, CvmMae, build_model
from .records import Manifest, load_manifest, resolve_path
from .rng import RngStreams
from .synth import load_image
from .vit import DecoderConfig, EncoderConfig

PHASES = ("pretrain", "probe", "finetune")
ARCHES = ("cve", "cve-meta", "cvm", "cvm-meta")
SCHEDULES = ("cosine_decay", "cosine_restarts")
ADAM_EPS = 1e-8


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Single-cycle cosine decay from base_lr at step 0 to min_lr at the end."""
    if total_steps < 1:
        raise RangeError(f"total_steps {total_steps} must be >= 1")
    if not 0 <= step <= total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


def init_adamw_state(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "m": {n: torch.zeros_like(p) for n, p in params.items()},
        "v": {n: torch.zeros_like(p) for n, p in params.items()},
    }


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.0,
    eps: float = ADAM_EPS,
) -> dict:
    """One decoupled-weight-decay Adam update, in place, with bias correction.

    Parameters without a gradient (frozen subtrees) are left untouched,
    including their decay. Returns the mutated state.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    with torch.no_grad():
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            if not bool(torch.isfinite(g).all()):
                raise NumericError(f"non-finite gradient for parameter {name}")
            p = params[name]
            p.mul_(1.0 - lr * weight_decay)
            m = state["m"][name]
            v = state["v"][name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
    return state


@dataclass
class PhaseConfig:
    phase: str
    arch: str = "cvm"
    seed: int = 0
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 32
    epochs: int = 20
    schedule: str = "cosine_decay"
    restart_period: int = 0
    min_lr_fraction: float = 0.01
    mask_ratio: float = 0.75
    meta_dropout_p: float = 0.25
    temperature: float = 1.0
    freeze_satellite: bool = True
    use_meta: bool = False
    n_classes: int = 0
    augment_ground: str = "eval"
    augment_satellite: str = "eval"
    # model geometry; defaults match the desk-scale synthetic corpus
    ground_image: int = 64
    ground_patch: int = 16
    sat_image: int = 32
    sat_patch: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}, expected one of {PHASES}")
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown arch {self.arch!r}, expected one of {ARCHES}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr {self.base_lr} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (paired objectives need negatives)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if not 0.0 <= self.meta_dropout_p <= 1.0:
            raise ConfigError(f"meta_dropout_p {self.meta_dropout_p} outside [0, 1]")
        if self.phase in ("probe", "finetune") and self.n_classes < 2:
            raise ConfigError(f"{self.phase} needs n_classes >= 2, got {self.n_classes}")
        get_policy(self.augment_ground)
        get_policy(self.augment_satellite)

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def encoder_configs(self) -> tuple[EncoderConfig, EncoderConfig, DecoderConfig]:
        ground = EncoderConfig(
            image_size=self.ground_image, patch_size=self.ground_patch,
            embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
        )
        sat = EncoderConfig(
            image_size=self.sat_image, patch_size=self.sat_patch,
            embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
        )
        dec = DecoderConfig(dim=self.dec_dim, depth=self.dec_depth, heads=self.dec_heads)
        return ground, sat, dec


# per-phase optimizer defaults; pretraining decays fast (beta2 0.95) while
# the supervised phases use the conventional 0.999
PHASE_DEFAULTS = {
    "pretrain": {"base_lr": 1e-4, "weight_decay": 0.01, "beta1": 0.9, "beta2": 0.95, "epochs": 20},
    "probe": {"base_lr": 0.1, "weight_decay": 1e-4, "beta1": 0.9, "beta2": 0.999, "epochs": 50},
    "finetune": {"base_lr": 5e-5, "weight_decay": 0.1, "beta1": 0.9, "beta2": 0.999, "epochs": 10},
}


def default_phase_config(phase: str, **overrides) -> PhaseConfig:
    if phase not in PHASE_DEFAULTS:
        raise ConfigError(f"unknown phase {phase!r}")
    kwargs = dict(PHASE_DEFAULTS[phase])
    kwargs.update(overrides)
    return PhaseConfig(phase=phase, **kwargs)


def scheduled_lr(config: PhaseConfig, step: int, total_steps: int) -> float:
    min_lr = config.base_lr * config.min_lr_fraction
    if config.schedule == "cosine_restarts":
        period = config.restart_period if config.restart_period > 0 else max(1, total_steps // 4)
        return cosine_lr(step % period, period, config.base_lr, min_lr)
    return cosine_lr(step, total_steps, config.base_lr, min_lr)


@dataclass
class PairDataset:
    ids: list[str]
    ground: np.ndarray
    satellite: np.ndarray
    metas: list[RawMetadata]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def load_pairs(manifest_path: str, manifest: Manifest | None = None) -> PairDataset:
    """Materialize a manifest's images in memory (desk-scale corpora only)."""
    manifest = manifest or load_manifest(manifest_path)
    grounds, sats, metas = [], [], []
    for row in manifest.rows:
        grounds.append(load_image(resolve_path(manifest_path, row.ground_path)))
        sats.append(load_image(resolve_path(manifest_path, row.satellite_path)))
        metas.append(RawMetadata(latitude=row.latitude, longitude=row.longitude, month=row.month))
    return PairDataset(
        ids=[r.id for r in manifest.rows],
        ground=np.stack(grounds),
        satellite=np.stack(sats),
        metas=metas,
        labels=np.array(manifest.species_ids(), dtype=np.int64),
    )


def _augment_batch(images: np.ndarray, policy: str, rng) -> np.ndarray:
    return np.stack([apply_policy(img, policy, rng) for img in images])


def _soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * torch.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def _mix_pair_batch(
    ground: np.ndarray,
    satellite: np.ndarray | None,
    onehot: np.ndarray,
    rng,
    policy,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Mixup or cutmix with one shared draw so paired modalities stay
    consistent; which of the two applies is a coin flip when both are
    configured."""
    if policy.mixup_alpha is None and policy.cutmix_alpha is None:
        return ground, satellite, onehot
    use_mixup = policy.mixup_alpha is not None
    if policy.mixup_alpha is not None and policy.cutmix_alpha is not None:
        use_mixup = rng.random() < 0.5
    perm = rng.permutation(ground.shape[0])
    if use_mixup:
        lam = float(rng.beta(policy.mixup_alpha, policy.mixup_alpha))
        ground = lam * ground + (1.0 - lam) * ground[perm]
        if satellite is not None:
            satellite = lam * satellite + (1.0 - lam) * satellite[perm]
        onehot = lam * onehot + (1.0 - lam) * onehot[perm]
        return ground, satellite, onehot
    lam = float(rng.beta(policy.cutmix_alpha, policy.cutmix_alpha))
    cut = math.sqrt(1.0 - lam)
    rel_cy, rel_cx = rng.random(), rng.random()
    area_fraction = None
    mixed = []
    for imgs in (ground, satellite):
        if imgs is None:
            mixed.append(None)
            continue
        h, w = imgs.shape[1:3]
        ch, cw = int(round(h * cut)), int(round(w * cut))
        cy, cx = int(rel_cy * h), int(rel_cx * w)
        y0, y1 = max(0, cy - ch // 2), min(h, cy + ch // 2)
        x0, x1 = max(0, cx - cw // 2), min(w, cx + cw // 2)
        out = imgs.copy()
        out[:, y0:y1, x0:x1] = imgs[perm][:, y0:y1, x0:x1]
        mixed.append(out)
        if area_fraction is None:  # the ground box defines the label weight
            area_fraction = (y1 - y0) * (x1 - x0) / (h * w)
    lam_adj = 1.0 - (area_fraction or 0.0)
    onehot = lam_adj * onehot + (1.0 - lam_adj) * onehot[perm]
    return mixed[0], mixed[1], onehot


@dataclass
class PhaseResult:
    checkpoint_path: str
    report: MetricReport
    loss_csv_path: str
    final_loss: float
    loss_history: list[dict] = field(default_factory=list)


def _write_loss_csv(path: str, history: list[dict]) -> None:
    keys = sorted({k for row in history for k in row if k != "epoch"})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + keys)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(row.get(k, "")) for k in keys])


def _trainable(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(
            f"species label {int(labels.max())} outside configured n_classes {n_classes}"
        )


def run_phase(
    config: PhaseConfig,
    manifest_path: str,
    out_dir: str,
    test_manifest_path: str | None = None,
    init_checkpoint: str | None = None,
) -> PhaseResult:
    """Train one phase end to end and write checkpoint + loss CSV to out_dir.

    pretrain ignores labels; probe/finetune need n_classes and report final
    metrics on the test manifest when one is given. init_checkpoint supplies
    the backbone for supervised phases (omitting it probes a randomly
    initialized backbone, the control case) and may also warm-start finetune
    from a probe checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    streams = RngStreams(config.seed)
    train_data = load_pairs(manifest_path)
    if len(train_data) == 0:
        raise ContractError("empty training manifest")
    if config.phase == "pretrain":
        return _run_pretrain(config, train_data, out_dir, streams, init_checkpoint)
    return _run_supervised(
        config, train_data, out_dir, streams, test_manifest_path, init_checkpoint
    )


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    n_batches = n // batch_size
    if n_batches == 0:
        raise ContractError(f"batch_size {batch_size} exceeds dataset size {n}")
    # full batches only: paired objectives degenerate on tiny remainders
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]


def _run_pretrain(
    config: PhaseConfig,
    data: PairDataset,
    out_dir: str,
    streams: RngStreams,
    init_checkpoint: str | None,
) -> PhaseResult:
    if init_checkpoint is not None:
        model = build_pretrain_model(load_checkpoint(init_checkpoint))
    else:
        ground_cfg, sat_cfg, dec_cfg = config.encoder_configs()
        model = build_model(
            config.arch, ground_cfg, sat_cfg, dec_cfg, seed=config.seed,
            freeze_satellite=config.freeze_satellite, temperature=config.temperature,
        )
    params = _trainable(model)
    state = init_adamw_state(params)
    n_batches = max(1, len(data) // config.batch_size)
    total_steps = max(1, config.epochs * n_batches)
    use_meta = model.arch.endswith("-meta")

    history = []
    step = 0
    for epoch in range(config.epochs):
        sums: dict[str, float] = {}
        batches = _epoch_batches(len(data), config.batch_size, streams.get("batch"))
        for idx in batches:
            aug_rng = streams.get("augment")
            ground = _augment_batch(data.ground[idx], config.augment_ground, aug_rng)
            sat = _augment_batch(data.satellite[idx], config.augment_satellite, aug_rng)
            metas = [data.metas[i] for i in idx] if use_meta else None
            out = model.forward_pretrain(
                ground, sat, metas,
                mask_ratio=config.mask_ratio,
                meta_dropout_p=config.meta_dropout_p,
                streams=streams, training=True,
            )
            loss = out.loss_components["L_total"]
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            adamw_step(
                params, grads, state,
                lr=scheduled_lr(config, step, total_steps),
                betas=config.betas, weight_decay=config.weight_decay,
            )
            step += 1
            for key, value in out.loss_components.items():
                sums[key] = sums.get(key, 0.0) + float(value.detach())
        history.append(
            {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        )

    report = MetricReport(loss_curve=[row["L_total"] for row in history])
    final_loss = report.loss_curve[-1] if report.loss_curve else float("nan")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(
        ckpt_path, model, arch=model.arch, phase="pretrain",
        config=model_config_dict(model),
        extra={"loss_curve": report.loss_curve, "seed": config.seed},
    )
    csv_path = os.path.join(out_dir, "losses.csv")
    _write_loss_csv(csv_path, history)
    return PhaseResult(ckpt_path, report, csv_path, final_loss, history)


def _build_classifier_for_run(
    config: PhaseConfig, init_checkpoint: str | None
) -> Classifier:
    if init_checkpoint is not None:
        data = load_checkpoint(init_checkpoint)
        if data.phase in ("probe", "finetune"):
            clf = build_classifier(data)
            if clf.n_classes != config.n_classes:
                raise ContractError(
                    f"checkpoint head has {clf.n_classes} classes, config wants {config.n_classes}"
                )
            # phase and dropout rate come from this run, not the stored one
            clf.phase = config.phase
            clf.meta_dropout_p = config.meta_dropout_p
            clf.backbone.requires_grad_(config.phase == "finetune")
            if config.phase == "finetune" and getattr(clf.backbone, "freeze_satellite", False):
                clf.backbone.satellite_encoder.requires_grad_(False)
            return clf
        backbone = build_pretrain_model(data)
    else:
        ground_cfg, sat_cfg, dec_cfg = config.encoder_configs()
        backbone = build_model(
            config.arch, ground_cfg, sat_cfg, dec_cfg, seed=config.seed,
            freeze_satellite=config.freeze_satellite, temperature=config.temperature,
        )
    return Classifier(
        backbone, n_classes=config.n_classes, phase=config.phase,
        use_meta=config.use_meta, meta_dropout_p=config.meta_dropout_p,
    )


def _embed_all(clf: Classifier, data: PairDataset, batch_size: int) -> torch.Tensor:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            ground = _augment_batch(data.ground[sl], "eval", None)
            sat = None
            if isinstance(clf.backbone, CvmMae):
                sat = _augment_batch(data.satellite[sl], "eval", None)
            chunks.append(clf.embed(ground, sat))
    return torch.cat(chunks, dim=0)


def evaluate_classifier(
    clf: Classifier, data: PairDataset, batch_size: int, use_meta: bool
) -> np.ndarray:
    """Deterministic predictions under the eval augmentation policy."""
    preds = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            ground = _augment_batch(data.ground[sl], "eval", None)
            sat = None
            if isinstance(clf.backbone, CvmMae):
                sat = _augment_batch(data.satellite[sl], "eval", None)
            metas = data.metas[sl] if use_meta else None
            logits = clf.forward(ground, sat, metas, training=False)
            preds.append(logits.argmax(dim=-1).numpy())
    return np.concatenate(preds)


def _run_supervised(
    config: PhaseConfig,
    data: PairDataset,
    out_dir: str,
    streams: RngStreams,
    test_manifest_path: str | None,
    init_checkpoint: str | None,
) -> PhaseResult:
    _check_labels(data.labels, config.n_classes)
    clf = _build_classifier_for_run(config, init_checkpoint)
    policy_g = get_policy(config.augment_ground)
    params = _trainable(clf)
    state = init_adamw_state(params)
    n_batches = max(1, len(data) // config.batch_size)
    total_steps = max(1, config.epochs * n_batches)
    onehot_all = np.eye(config.n_classes, dtype=np.float64)[data.labels]

    # a frozen backbone under deterministic augmentation has fixed
    # embeddings, so compute them once and train only the head pathway
    cache = None
    if config.phase == "probe" and config.augment_ground in ("identity", "eval") and (
        config.augment_satellite in ("identity", "eval")
    ):
        cache = _embed_all(clf, data, config.batch_size)

    history = []
    step = 0
    for epoch in range(config.epochs):
        total = 0.0
        batches = _epoch_batches(len(data), config.batch_size, streams.get("batch"))
        for idx in batches:
            metas = [data.metas[i] for i in idx] if config.use_meta else None
            targets_np = onehot_all[idx]
            if cache is not None:
                logits = clf.head_forward(
                    cache[torch.from_numpy(idx)], metas, training=True, streams=streams
                )
            else:
                aug_rng = streams.get("augment")
                ground = _augment_batch(data.ground[idx], config.augment_ground, aug_rng)
                sat = None
                if isinstance(clf.backbone, CvmMae):
                    sat = _augment_batch(data.satellite[idx], config.augment_satellite, aug_rng)
                ground, sat, targets_np = _mix_pair_batch(
                    ground, sat, targets_np, aug_rng, policy_g
                )
                logits = clf.forward(ground, sat, metas, training=True, streams=streams)
            if policy_g.label_smoothing:
                targets_np = smooth_labels(targets_np, policy_g.label_smoothing)
            loss = _soft_cross_entropy(logits, torch.from_numpy(targets_np))
            clf.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            adamw_step(
                params, grads, state,
                lr=scheduled_lr(config, step, total_steps),
                betas=config.betas, weight_decay=config.weight_decay,
            )
            step += 1
            total += float(loss.detach())
        history.append({"epoch": epoch, "L_total": total / len(batches)})

    report = MetricReport(loss_curve=[row["L_total"] for row in history])
    if test_manifest_path is not None:
        test_data = load_pairs(test_manifest_path)
        _check_labels(test_data.labels, config.n_classes)
        preds = evaluate_classifier(clf, test_data, config.batch_size, config.use_meta)
        scored = compute_metrics(preds, test_data.labels, config.n_classes)
        report = MetricReport(
            accuracy=scored.accuracy, macro_f1=scored.macro_f1,
            macro_precision=scored.macro_precision, macro_recall=scored.macro_recall,
            loss_curve=report.loss_curve,
        )

    final_loss = report.loss_curve[-1] if report.loss_curve else float("nan")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(
        ckpt_path, clf, arch=clf.backbone.arch, phase=config.phase,
        config={
            "backbone": model_config_dict(clf.backbone),
            "n_classes": config.n_classes,
            "use_meta": clf.meta_embedder is not None,
            "meta_dropout_p": config.meta_dropout_p,
        },
        extra={"metrics": report.as_dict(), "seed": config.seed},
    )
    csv_path = os.path.join(out_dir, "losses.csv")
    _write_loss_csv(csv_path, history)
    return PhaseResult(ckpt_path, report, csv_path, final_loss, history)


SWEEP_RATES = (0.0, 0.25, 0.5, 0.75, 1.0)
SWEEP_COLUMNS = ("rate", "final_pretrain_loss", "probe_accuracy", "probe_macro_f1", "wall_clock_s")


def meta_dropout_sweep(
    pretrain_config: PhaseConfig,
    probe_config: PhaseConfig,
    manifest_path: str,
    test_manifest_path: str,
    out_dir: str,
    rates: tuple[float, ...] = SWEEP_RATES,
) -> list[dict]:
    """Pretrain + probe once per meta-dropout rate; the rate under test is
    applied in both phases. Emits sweep.csv with one row per rate."""
    if not pretrain_config.arch.endswith("-meta"):
        raise ConfigError("meta-dropout sweep needs a -meta architecture")
    rows = []
    for i, rate in enumerate(rates):
        started = time.perf_counter()
        rate_dir = os.path.join(out_dir, f"rate_{i}")
        pre = replace(pretrain_config, meta_dropout_p=rate)
        pre_result = run_phase(pre, manifest_path, os.path.join(rate_dir, "pretrain"))
        probe = replace(probe_config, meta_dropout_p=rate, use_meta=True)
        probe_result = run_phase(
            probe, manifest_path, os.path.join(rate_dir, "probe"),
            test_manifest_path=test_manifest_path,
            init_checkpoint=pre_result.checkpoint_path,
        )
        rows.append(
            {
                "rate": rate,
                "final_pretrain_loss": pre_result.final_loss,
                "probe_accuracy": probe_result.report.accuracy,
                "probe_macro_f1": probe_result.report.macro_f1,
                "wall_clock_s": time.perf_counter() - started,
            }
        )
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in SWEEP_COLUMNS])
    return rows
