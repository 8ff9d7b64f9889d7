"""Patch grids, the shared linear projection, and per-patch normalized targets.

All grids are row-major: patch ``i`` sits at ``(i // p, i % p)``. Inside a
patch, pixels are flattened as ``(row, col, channel)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DimensionError(ValueError):
    """Array shape does not conform to the patch grid."""


@dataclass
class RgbtPair:
    rgb: np.ndarray  # H x W x 3, uint8
    thermal: np.ndarray  # H x W x 1, uint8
    source_id: str = ""
    frame_index: Optional[int] = None
    object_mask: Optional[np.ndarray] = None  # H x W bool

    def __post_init__(self):
        if self.thermal.ndim == 2:
            self.thermal = self.thermal[..., None]
        if self.rgb.shape[:2] != self.thermal.shape[:2]:
            raise DimensionError(
                f"rgb {self.rgb.shape[:2]} and thermal {self.thermal.shape[:2]} differ"
            )
        if self.object_mask is not None and self.object_mask.shape != self.rgb.shape[:2]:
            raise DimensionError("object_mask must match image size")


@dataclass
class PatchPixels:
    patches: np.ndarray  # (p*p, patch_size**2 * C)
    patch_size: int
    grid_side: int
    channels: int


@dataclass
class PatchEmbeddings:
    embeddings: np.ndarray  # (p*p, d)
    grid_side: int
    modality: str = "rgb"


@dataclass
class NormalizedTargets:
    targets: np.ndarray
    per_patch_mean: np.ndarray
    per_patch_std: np.ndarray = field(repr=False)


def patchify(image: np.ndarray, patch_size: int = 16) -> PatchPixels:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch_size}")
    if h != w:
        raise DimensionError(f"square images required, got {h}x{w}")
    p = h // patch_size
    x = img.reshape(p, patch_size, p, patch_size, c).transpose(0, 2, 1, 3, 4)
    return PatchPixels(x.reshape(p * p, patch_size * patch_size * c), patch_size, p, c)


def unpatchify(px: PatchPixels) -> np.ndarray:
    p, s, c = px.grid_side, px.patch_size, px.channels
    x = px.patches.reshape(p, p, s, s, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(p * s, p * s, c)


def replicate_thermal(px: PatchPixels) -> PatchPixels:
    """Repeat a single-channel patch grid to 3 channels (per-pixel interleaved)."""
    if px.channels == 3:
        return px
    if px.channels != 1:
        raise DimensionError(f"expected 1 or 3 channels, got {px.channels}")
    rep = np.repeat(px.patches, 3, axis=1)
    return PatchPixels(rep, px.patch_size, px.grid_side, 3)


def embed_patches(px: PatchPixels, weight: np.ndarray, bias: np.ndarray,
                  modality: str = "rgb") -> PatchEmbeddings:
    """Apply ``W @ x + b`` to every patch vector; thermal input is channel-replicated.

    ``weight`` has shape (d, patch_size**2 * 3) like a torch ``Linear``.
    """
    px = replicate_thermal(px)
    weight = np.asarray(weight)
    if weight.shape[1] != px.patches.shape[1]:
        raise DimensionError(
            f"projection expects {weight.shape[1]} inputs, patches have {px.patches.shape[1]}"
        )
    if np.shape(bias) != (weight.shape[0],):
        raise DimensionError("bias length must equal embedding dim")
    emb = px.patches @ weight.T + bias
    return PatchEmbeddings(emb, px.grid_side, modality)


def normalize_targets(px: PatchPixels, eps: float = 1e-6) -> NormalizedTargets:
    x = np.asarray(px.patches, dtype=np.float64)
    mean = x.mean(axis=1)
    std = x.std(axis=1)
    flat = std < eps
    std = np.where(flat, eps, std)
    t = (x - mean[:, None]) / std[:, None]
    t[flat] = 0.0
    p = px.grid_side
    return NormalizedTargets(t, mean.reshape(p, p), std.reshape(p, p))


def denormalize(targets: np.ndarray, nt: NormalizedTargets) -> np.ndarray:
    return targets * nt.per_patch_std.reshape(-1, 1) + nt.per_patch_mean.reshape(-1, 1)
