"""Siamese masked autoencoder for paired RGB/thermal images.

One encoder (a single set of weights) runs over the visible tokens of each
modality. A cross-attention exchange, with weights shared across both
directions, lets each modality's latents attend to the other's. Two
independent decoders then reconstruct the masked patches of their modality.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ModelConfig:
    img_size: int = 48
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 4
    decoder_heads: int = 4
    mlp_ratio: float = 4.0

    @property
    def grid_side(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_chans

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": ModelConfig(),
    "fidelity": ModelConfig(img_size=224, patch_size=16, embed_dim=768, depth=12,
                            num_heads=12, decoder_dim=512, decoder_depth=4,
                            decoder_heads=16),
    "tiny": ModelConfig(img_size=32, patch_size=8, embed_dim=16, depth=1, num_heads=2,
                        decoder_dim=16, decoder_depth=1, decoder_heads=2, mlp_ratio=2.0),
}


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid_side: int) -> np.ndarray:
    """Fixed 2-D sin-cos table, (grid_side**2, dim), row-major."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(grid_side), np.arange(grid_side), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)


class MultiHeadAttention(nn.Module):
    """Multi-head attention with one packed q/k/v projection.

    Called as ``attn(x, x)`` it is self-attention; with two different inputs
    the queries come from the first and keys/values from the second.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor, n_parts: int) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, n_parts, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor) -> torch.Tensor:
        B, n, d = x_q.shape
        if x_q is x_kv:
            q, k, v = self._heads(self.qkv(x_q), 3)
        else:
            w, b = self.qkv.weight, self.qkv.bias
            q = self._heads(F.linear(x_q, w[:d], b[:d]), 1)[0]
            k, v = self._heads(F.linear(x_kv, w[d:], b[d:]), 2)
        att = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, n, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.decoder_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio)
            for _ in range(cfg.decoder_depth)
        )
        self.norm = nn.LayerNorm(cfg.decoder_dim) if cfg.decoder_depth else nn.Identity()
        self.head = nn.Linear(cfg.decoder_dim, cfg.patch_dim)
        pos = sincos_2d(cfg.decoder_dim, cfg.grid_side)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float()[None], persistent=False)

    def forward(self, z: torch.Tensor, vis_idx: torch.Tensor) -> torch.Tensor:
        B, L = z.shape[0], self.pos_embed.shape[1]
        x = self.embed(z)
        full = self.mask_token.expand(B, L, -1).clone()
        full = full.scatter(1, vis_idx[..., None].expand(-1, -1, x.shape[-1]), x)
        full = full + self.pos_embed
        for blk in self.blocks:
            full = blk(full)
        return self.head(self.norm(full))


class SiameseMAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        pos = sincos_2d(cfg.embed_dim, cfg.grid_side)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float()[None], persistent=False)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim) if cfg.depth else nn.Identity()
        self.cross = MultiHeadAttention(cfg.embed_dim, cfg.num_heads)
        self.decoders = nn.ModuleDict({"rgb": Decoder(cfg), "thermal": Decoder(cfg)})
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for dec in self.decoders.values():
            nn.init.normal_(dec.mask_token, std=0.02)
        # exchange starts as a no-op: two plain MAEs
        nn.init.zeros_(self.cross.proj.weight)
        nn.init.zeros_(self.cross.proj.bias)

    # -- pieces -----------------------------------------------------------
    def patchify(self, imgs: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, L, s*s*C), row-major patches."""
        B, H, W, C = imgs.shape
        s = self.cfg.patch_size
        p = H // s
        x = imgs.reshape(B, p, s, p, s, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, p * p, s * s * C)

    def embed(self, px: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(px)

    def encode_tokens(self, tokens: torch.Tensor, vis_idx: torch.Tensor) -> torch.Tensor:
        pos = self.pos_embed.expand(tokens.shape[0], -1, -1)
        x = tokens + torch.gather(pos, 1, vis_idx[..., None].expand(-1, -1, pos.shape[-1]))
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def encode_visible(self, emb: torch.Tensor, vis_idx: torch.Tensor) -> torch.Tensor:
        if vis_idx.shape[1] == 0:
            raise ValueError("no visible patches to encode")
        tokens = torch.gather(emb, 1, vis_idx[..., None].expand(-1, -1, emb.shape[-1]))
        return self.encode_tokens(tokens, vis_idx)

    def encode_all(self, px: torch.Tensor) -> torch.Tensor:
        """Encoder output for every patch, no masking."""
        B, L = px.shape[:2]
        idx = torch.arange(L, device=px.device).expand(B, L)
        return self.encode_tokens(self.embed(px), idx)

    def cross_attend(self, z_rgb: torch.Tensor, z_t: torch.Tensor):
        return z_rgb + self.cross(z_rgb, z_t), z_t + self.cross(z_t, z_rgb)

    def decode(self, z: torch.Tensor, vis_idx: torch.Tensor, modality: str) -> torch.Tensor:
        return self.decoders[modality](z, vis_idx)

    # -- full pass --------------------------------------------------------
    def forward(self, px_rgb, px_t, vis_rgb, vis_t, use_cross: bool = True):
        z_r = self.encode_visible(self.embed(px_rgb), vis_rgb)
        z_t = self.encode_visible(self.embed(px_t), vis_t)
        if use_cross:
            z_r, z_t = self.cross_attend(z_r, z_t)
        return self.decode(z_r, vis_rgb, "rgb"), self.decode(z_t, vis_t, "thermal")


def build_model(cfg: ModelConfig, seed: int = 0) -> SiameseMAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SiameseMAE(cfg)


def normalize_patch_targets(px: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = px.mean(dim=-1, keepdim=True)
    std = px.std(dim=-1, unbiased=False, keepdim=True)
    flat = std < eps
    t = (px - mean) / torch.where(flat, torch.full_like(std, eps), std)
    return torch.where(flat, torch.zeros_like(t), t)


def masked_mse(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked patches only; ``masked`` is (B, L) bool."""
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    m = masked.to(per_patch.dtype)
    return (per_patch * m).sum() / m.sum().clamp(min=1.0)


def reconstruction_loss(pred_rgb, pred_t, tgt_rgb, tgt_t, masked_rgb, masked_t):
    l_r = masked_mse(pred_rgb, tgt_rgb, masked_rgb)
    l_t = masked_mse(pred_t, tgt_t, masked_t)
    return l_r + l_t, l_r, l_t


def finite_difference_check(model: SiameseMAE, batch: dict, n_params: int,
                            rng: np.random.Generator, h: float = 1e-5,
                            atol: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``batch`` holds float64 tensors ``px_rgb``, ``px_t``, ``tgt_rgb``,
    ``tgt_t`` and index/bool tensors ``vis_rgb``, ``vis_t``, ``masked_rgb``,
    ``masked_t``. Relative error is ``|g - fd| / max(|g|, |fd|, atol)``.
    """
    model = model.double()

    def loss_fn():
        pr, pt = model(batch["px_rgb"], batch["px_t"], batch["vis_rgb"], batch["vis_t"])
        return reconstruction_loss(pr, pt, batch["tgt_rgb"], batch["tgt_t"],
                                   batch["masked_rgb"], batch["masked_t"])[0]

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    flat_pick = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat_pick:
            pi = int(np.searchsorted(offsets, f, side="right") - 1)
            p = params[pi]
            j = int(f - offsets[pi])
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
            fd = (up - down) / (2 * h)
            err = abs(analytic - fd) / max(abs(analytic), abs(fd), atol)
            worst = max(worst, err)
    return worst
