"""Image I/O, in-memory datasets, paired augmentation and tensor preparation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .patchgrid import RgbtPair


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im)


def load_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def _fit_size(a: np.ndarray, size: int, resample) -> np.ndarray:
    if a.shape[0] == size and a.shape[1] == size:
        return a
    return np.asarray(Image.fromarray(a).resize((size, size), resample))


def load_pair(manifest, rec, size: Optional[int] = None) -> RgbtPair:
    rgb = load_image(manifest.resolve(rec.rgb_path))
    th = load_image(manifest.resolve(rec.thermal_path))
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    if th.ndim == 3:
        th = np.asarray(Image.fromarray(th).convert("L"))
    mask = None
    if rec.mask_path:
        mask = load_image(manifest.resolve(rec.mask_path)) > 127
        if mask.ndim == 3:
            mask = mask[..., 0]
    if size:
        rgb = _fit_size(rgb, size, Image.BICUBIC)
        th = _fit_size(th, size, Image.BICUBIC)
        if mask is not None:
            mask = _fit_size(mask.astype(np.uint8) * 255, size, Image.NEAREST) > 127
    return RgbtPair(rgb, th, rec.source_id, rec.frame_index, mask)


@dataclass
class PairDataset:
    """Stacked uint8 arrays: rgb (N,H,W,3), thermal (N,H,W,1), masks (N,H,W) or None."""

    rgb: np.ndarray
    thermal: np.ndarray
    masks: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.rgb.shape[0]

    def pair(self, i: int) -> RgbtPair:
        return RgbtPair(self.rgb[i], self.thermal[i],
                        object_mask=None if self.masks is None else self.masks[i])

    @classmethod
    def from_pairs(cls, pairs) -> "PairDataset":
        pairs = list(pairs)
        masks = None
        if pairs and all(p.object_mask is not None for p in pairs):
            masks = np.stack([p.object_mask for p in pairs])
        return cls(np.stack([p.rgb for p in pairs]), np.stack([p.thermal for p in pairs]), masks)

    @classmethod
    def from_manifest(cls, manifest, size: int, kept_only: bool = True) -> "PairDataset":
        recs = manifest.kept() if kept_only else manifest.records
        if not recs:
            raise ValueError("manifest has no usable records")
        return cls.from_pairs(load_pair(manifest, r, size) for r in recs)


# -- augmentation -----------------------------------------------------------

def hflip(pair: RgbtPair) -> RgbtPair:
    return RgbtPair(pair.rgb[:, ::-1].copy(), pair.thermal[:, ::-1].copy(), pair.source_id,
                    pair.frame_index,
                    None if pair.object_mask is None else pair.object_mask[:, ::-1].copy())


def sample_crop(h: int, w: int, scale, ratio, rng: np.random.Generator):
    """Random-resized-crop window (top, left, height, width)."""
    area = h * w
    log_r = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ar = np.exp(rng.uniform(log_r[0], log_r[1]))
        cw = int(round(np.sqrt(target * ar)))
        ch = int(round(np.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fall back to the largest centered crop within the ratio bounds
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def augment_pair(pair: RgbtPair, rng: np.random.Generator, out_size: Optional[int] = None,
                 scale=(0.2, 1.0), ratio=(3 / 4, 4 / 3), flip_prob: float = 0.5) -> RgbtPair:
    """One crop window and one flip decision, applied to both modalities."""
    h, w = pair.rgb.shape[:2]
    out_size = out_size or h
    top, left, ch, cw = sample_crop(h, w, scale, ratio, rng)
    flip = rng.random() < flip_prob

    def crop(a, resample):
        a = a[top:top + ch, left:left + cw]
        if a.shape[0] != out_size or a.shape[1] != out_size:
            a = np.asarray(Image.fromarray(a).resize((out_size, out_size), resample))
        return a

    rgb = crop(pair.rgb, Image.BICUBIC)
    th = crop(pair.thermal[..., 0], Image.BICUBIC)[..., None]
    mask = None
    if pair.object_mask is not None:
        mask = crop(pair.object_mask.astype(np.uint8) * 255, Image.NEAREST) > 127
    out = RgbtPair(rgb, th, pair.source_id, pair.frame_index, mask)
    return hflip(out) if flip else out


# -- tensors ----------------------------------------------------------------

@dataclass
class InputNorm:
    mean: float = 0.5
    std: float = 0.25


def to_tensors(rgb: np.ndarray, thermal: np.ndarray, norm: InputNorm,
               dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """uint8 batches -> normalized (B,H,W,3) tensors; thermal is channel-replicated."""
    r = torch.from_numpy(np.ascontiguousarray(rgb)).to(dtype) / 255.0
    t = torch.from_numpy(np.ascontiguousarray(thermal)).to(dtype) / 255.0
    if t.ndim == 3:
        t = t[..., None]
    t = t.expand(*t.shape[:-1], 3)
    return (r - norm.mean) / norm.std, (t - norm.mean) / norm.std


def patch_labels(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """(H,W) bool -> (p,p) bool: object iff at least half the patch is object."""
    h, w = mask.shape
    p = h // patch_size
    frac = mask.reshape(p, patch_size, w // patch_size, patch_size).mean(axis=(1, 3))
    return frac >= 0.5
