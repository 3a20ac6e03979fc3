"""Config-driven image augmentation on channels-last float arrays.

All randomness flows through an explicit numpy Generator so a policy's
draws come from the named "augment" stream and never perturb masking or
dropout streams. Mixup/cutmix operate on batches and return mixed label
distributions; label smoothing belongs at the loss boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float64)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float64)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def normalize_channels(image: np.ndarray) -> np.ndarray:
    return (image - IMAGENET_MEAN) / IMAGENET_STD


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resampling (no antialiasing)."""
    h, w = image.shape[:2]
    if h == out_h and w == out_w:
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def random_resized_crop(
    image: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.2, 1.0),
    ratio: tuple[float, float] = (0.75, 4.0 / 3.0),
) -> np.ndarray:
    """Crop a random area/aspect region and resize back to the input size."""
    h, w = image.shape[:2]
    area = h * w
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = image[top : top + ch, left : left + cw]
            return bilinear_resize(crop, h, w)
    return image.copy()


def horizontal_flip(image: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    if rng.random() < p:
        return image[:, ::-1].copy()
    return image


def color_jitter(image: np.ndarray, rng: np.random.Generator, strength: float = 0.5) -> np.ndarray:
    """Brightness, contrast, saturation, in that fixed order; each factor
    drawn from U(max(0, 1-strength), 1+strength)."""
    lo = max(0.0, 1.0 - strength)
    hi = 1.0 + strength
    out = image * rng.uniform(lo, hi)
    mean = (out @ LUMA).mean()
    out = mean + (out - mean) * rng.uniform(lo, hi)
    gray = (out @ LUMA)[..., None]
    out = gray + (out - gray) * rng.uniform(lo, hi)
    return np.clip(out, 0.0, 1.0)


def mixup(
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    alpha: float = 0.8,
    lam: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Convex batch blend; labels must already be one-hot/distributional."""
    if images.shape[0] != labels.shape[0]:
        raise ShapeError("mixup batch size mismatch between images and labels")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(images.shape[0])
    mixed = lam * images + (1.0 - lam) * images[perm]
    mixed_labels = lam * labels + (1.0 - lam) * labels[perm]
    return mixed, mixed_labels


def cutmix(
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    alpha: float = 1.0,
    lam: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Paste a random box from a permuted batch; label weight follows the
    actual pasted area."""
    if images.shape[0] != labels.shape[0]:
        raise ShapeError("cutmix batch size mismatch between images and labels")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    b, h, w = images.shape[:3]
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(round(h * cut)), int(round(w * cut))
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(0, cy - ch // 2), min(h, cy + ch // 2)
    x0, x1 = max(0, cx - cw // 2), min(w, cx + cw // 2)
    perm = rng.permutation(b)
    mixed = images.copy()
    mixed[:, y0:y1, x0:x1] = images[perm][:, y0:y1, x0:x1]
    area = (y1 - y0) * (x1 - x0)
    lam_adjusted = 1.0 - area / (h * w)
    mixed_labels = lam_adjusted * labels + (1.0 - lam_adjusted) * labels[perm]
    return mixed, mixed_labels


def smooth_labels(onehot: np.ndarray, eps: float = 0.1) -> np.ndarray:
    n_classes = onehot.shape[-1]
    return onehot * (1.0 - eps) + eps / n_classes


@dataclass(frozen=True)
class AugmentPolicy:
    crop: bool = False
    flip: bool = False
    jitter: bool = False
    normalize: bool = True
    mixup_alpha: float | None = None
    cutmix_alpha: float | None = None
    label_smoothing: float = 0.0


POLICIES: dict[str, AugmentPolicy] = {
    "identity": AugmentPolicy(normalize=False),
    "eval": AugmentPolicy(),
    "pretrain_ground": AugmentPolicy(crop=True, flip=True),
    "pretrain_sat": AugmentPolicy(crop=True, flip=True, jitter=True),
    "probe": AugmentPolicy(flip=True),
    "finetune_ground": AugmentPolicy(
        crop=True, flip=True, jitter=True,
        mixup_alpha=0.8, cutmix_alpha=1.0, label_smoothing=0.1,
    ),
    "finetune_sat": AugmentPolicy(crop=True, flip=True, jitter=True),
}


def get_policy(name: str) -> AugmentPolicy:
    try:
        return POLICIES[name]
    except KeyError:
        raise ConfigError(
            f"unknown augmentation policy {name!r}, expected one of {sorted(POLICIES)}"
        ) from None


def apply_policy(image: np.ndarray, policy_name: str, rng: np.random.Generator) -> np.ndarray:
    """Per-sample pipeline; batch-level mixup/cutmix are applied by the
    training loop using the policy's alphas."""
    policy = get_policy(policy_name)
    out = image
    if policy.crop:
        out = random_resized_crop(out, rng)
    if policy.flip:
        out = horizontal_flip(out, rng)
    if policy.jitter:
        out = color_jitter(out, rng)
    if policy.normalize:
        out = normalize_channels(out)
    return out
