"""Cross-modality structural sparsity (CMSS).

Low values mark information-rich patches: the two modalities disagree there
and the embeddings have high spread. Flat, mutually similar regions score high.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import raw_cmss_rows
from .patchgrid import DimensionError, PatchEmbeddings

DEFAULT_EPS = 1e-6


@dataclass
class CmssMap:
    values: np.ndarray  # (p, p) in [0, 1]
    raw_values: np.ndarray  # (p, p) >= 0
    degenerate: bool = False

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def raw_cmss(a, b, eps: float = DEFAULT_EPS) -> float:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(1, -1)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(1, -1)
    if a.shape != b.shape or a.shape[1] < 2:
        raise DimensionError("embedding vectors must share a length >= 2")
    return float(raw_cmss_rows(a, b, eps)[0])


def normalize_map(raw: np.ndarray, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, bool]:
    lo, hi = raw.min(), raw.max()
    if hi - lo < eps:
        return np.full_like(raw, 0.5, dtype=np.float64), True
    return (raw - lo) / (hi - lo), False


def cmss_from_arrays(emb_rgb: np.ndarray, emb_t: np.ndarray,
                     eps: float = DEFAULT_EPS) -> CmssMap:
    """CMSS map from two (p*p, d) embedding arrays."""
    a = np.ascontiguousarray(emb_rgb, dtype=np.float64)
    b = np.ascontiguousarray(emb_t, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"embedding grids differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    p = int(round(np.sqrt(n)))
    if p * p != n:
        raise DimensionError(f"{n} patches is not a square grid")
    raw = raw_cmss_rows(a, b, eps)
    values, degenerate = normalize_map(raw, eps)
    return CmssMap(values.reshape(p, p), raw.reshape(p, p), degenerate)


def cmss_map(emb_rgb: PatchEmbeddings, emb_t: PatchEmbeddings,
             eps: float = DEFAULT_EPS) -> CmssMap:
    if emb_rgb.grid_side != emb_t.grid_side:
        raise DimensionError("grid shapes differ")
    return cmss_from_arrays(emb_rgb.embeddings, emb_t.embeddings, eps)


def cmss_batch(emb_rgb: np.ndarray, emb_t: np.ndarray,
               eps: float = DEFAULT_EPS) -> list[CmssMap]:
    """One map per pair for (B, p*p, d) embedding batches."""
    return [cmss_from_arrays(a, b, eps) for a, b in zip(emb_rgb, emb_t)]


def to_heatmap(cm: CmssMap, scale: int = 16) -> np.ndarray:
    """8-bit grayscale heatmap, each patch upsampled to ``scale`` pixels."""
    img = np.round(cm.values * 255).astype(np.uint8)
    return np.kron(img, np.ones((scale, scale), dtype=np.uint8))
