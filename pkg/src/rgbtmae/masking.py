"""Progressive CMSS-guided masking.

Training progress and the fitted mixture define a sampling function over
CMSS values. Sampled points claim patches one-to-one by nearest CMSS value;
claimed patches stay visible to the encoder and the rest are masked. Early in
training the sampler sits at CMSS 0 (information-rich patches visible), at
the midpoint it equals the fitted mixture, and at the end every mean is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cmss import CmssMap
from .gmm import GmmState
from .kernels import greedy_match

MODALITIES = ("rgb", "thermal")
MASK_MODES = ("gmm_cmss", "random", "low_cmss", "high_cmss")


class MaskBudgetError(ValueError):
    """The requested ratio leaves no visible or no masked patch."""


@dataclass
class ScheduleConfig:
    warmup_end: float = 0.05
    ramp_in_end: float = 0.50
    init_variance: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.warmup_end < self.ramp_in_end < 1.0:
            raise ValueError("need 0 <= warmup_end < ramp_in_end < 1")


@dataclass
class SamplerConfig:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    mu_bias: float = 0.0
    phase_label: str = "warmup"
    uniform: bool = False  # warmup: plain random masking

    @property
    def active_K(self) -> int:
        return int(self.means.shape[0])

    def with_bias(self, mu_bias: float) -> "SamplerConfig":
        return replace(self, mu_bias=float(mu_bias))

    def effective_means(self) -> np.ndarray:
        return np.clip(self.means + self.mu_bias, -0.2, 1.2)


@dataclass
class MaskBudget:
    base_ratio: float = 0.9
    r_bias: dict = field(default_factory=lambda: {"rgb": 0.0, "thermal": 0.0})

    def ratio(self, modality: str) -> float:
        return self.base_ratio + self.r_bias.get(modality, 0.0)


@dataclass
class MaskPlan:
    visible: np.ndarray  # (p, p) bool
    masked_count: int
    modality: str = "rgb"
    seed: Optional[int] = None

    @property
    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(self.visible.reshape(-1))

    @property
    def masked(self) -> np.ndarray:
        return ~self.visible


@dataclass
class LossStats:
    ema_loss_rgb: float = 1.0
    ema_loss_thermal: float = 1.0
    ema_decay: float = 0.99

    def update(self, loss_rgb: float, loss_thermal: float) -> "LossStats":
        d = self.ema_decay
        return LossStats(d * self.ema_loss_rgb + (1 - d) * float(loss_rgb),
                         d * self.ema_loss_thermal + (1 - d) * float(loss_thermal), d)


@dataclass
class BiasGains:
    gamma_r: float = 0.1
    gamma_mu: float = 0.2
    r_cap: float = 0.05
    mu_cap: float = 0.1
    eps: float = 1e-8


def mask_count(n_patches: int, ratio: float) -> int:
    """Masked patches for a ratio, rounding half up."""
    return int(np.floor(n_patches * ratio + 0.5))


def schedule_at(progress: float, gmm: GmmState,
                cfg: ScheduleConfig | None = None) -> SamplerConfig:
    cfg = cfg or ScheduleConfig()
    if not 0.0 <= progress <= 1.0 or np.isnan(progress):
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    g = gmm.sorted()
    K = g.K
    if progress < cfg.warmup_end:
        return SamplerConfig(g.means.copy(), g.variances.copy(), g.weights.copy(),
                             phase_label="warmup", uniform=True)

    if progress < cfg.ramp_in_end:
        span = (cfg.ramp_in_end - cfg.warmup_end) / K
        k = min(int((progress - cfg.warmup_end) / span), K - 1)
        frac = (progress - cfg.warmup_end - k * span) / span
        frac = min(max(frac, 0.0), 1.0)
        means = g.means[: k + 1].copy()
        variances = g.variances[: k + 1].copy()
        means[k] = frac * g.means[k]
        variances[k] = cfg.init_variance + frac * (g.variances[k] - cfg.init_variance)
        w = g.weights[: k + 1]
        return SamplerConfig(means, variances, w / w.sum(), phase_label=f"ramp_in_{k + 1}")

    span = (1.0 - cfg.ramp_in_end) / K
    k = min(int((progress - cfg.ramp_in_end) / span), K - 1)
    frac = (progress - cfg.ramp_in_end - k * span) / span
    frac = min(max(frac, 0.0), 1.0)
    means = g.means.copy()
    means[:k] = 1.0
    if frac > 0.0:
        means[k] = g.means[k] + frac * (1.0 - g.means[k])
    label = "mid" if progress == cfg.ramp_in_end else f"ramp_out_{k + 1}"
    return SamplerConfig(means, g.variances.copy(), g.weights.copy(), phase_label=label)


def phase_midpoints(K: int = 3, cfg: ScheduleConfig | None = None) -> list[float]:
    """Ramp-in sub-phase midpoints, the midpoint itself, ramp-out midpoints."""
    cfg = cfg or ScheduleConfig()
    span_in = (cfg.ramp_in_end - cfg.warmup_end) / K
    span_out = (1.0 - cfg.ramp_in_end) / K
    pts = [cfg.warmup_end + (k + 0.5) * span_in for k in range(K)]
    pts.append(cfg.ramp_in_end)
    pts += [cfg.ramp_in_end + (k + 0.5) * span_out for k in range(K)]
    return pts


def sample_points(cfg: SamplerConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.empty(0)
    comp = rng.choice(cfg.active_K, size=n, p=cfg.weights)
    mu = cfg.effective_means()[comp]
    sd = np.sqrt(cfg.variances)[comp]
    return np.clip(rng.normal(mu, sd), 0.0, 1.0)


def _plan(n_side: int, visible_idx: np.ndarray, modality: str, seed) -> MaskPlan:
    vis = np.zeros(n_side * n_side, dtype=bool)
    vis[visible_idx] = True
    return MaskPlan(vis.reshape(n_side, n_side), int(vis.size - vis.sum()), modality, seed)


def _visible_count(n: int, ratio: float) -> int:
    v = n - mask_count(n, ratio)
    if v <= 0 or v >= n:
        raise MaskBudgetError(f"ratio {ratio:.4f} on {n} patches leaves {v} visible")
    return v


def select_visible(cmss: CmssMap, cfg: SamplerConfig, budget: MaskBudget,
                   modality: str, rng: np.random.Generator,
                   exclude: np.ndarray | None = None, seed=None) -> MaskPlan:
    """Pick the visible patch set for one modality of one pair.

    ``exclude`` (flat bool) forbids patches, used for strictly complementary
    RGB/thermal plans.
    """
    values = np.ascontiguousarray(cmss.values.reshape(-1), dtype=np.float64)
    n = values.size
    p = cmss.values.shape[0]
    v = _visible_count(n, budget.ratio(modality))
    allowed = np.ones(n, dtype=bool) if exclude is None else ~np.asarray(exclude).reshape(-1)
    if allowed.sum() < v:
        raise MaskBudgetError("not enough non-excluded patches")
    if cfg.uniform or cmss.degenerate:
        idx = rng.choice(np.flatnonzero(allowed), size=v, replace=False)
        return _plan(p, idx, modality, seed)
    if modality != "thermal":
        cfg = cfg.with_bias(0.0)
    pts = sample_points(cfg, v, rng)
    order = rng.permutation(v).astype(np.int64)
    if exclude is not None:
        values = np.where(allowed, values, np.inf)
    idx = greedy_match(values, pts, order)
    return _plan(p, idx, modality, seed)


def update_modality_bias(stats: LossStats, gains: BiasGains | None = None,
                         base_ratio: float = 0.9) -> tuple[MaskBudget, float]:
    """Higher thermal loss: mask thermal less and shift its sampler toward low CMSS."""
    g = gains or BiasGains()
    lt, lr = stats.ema_loss_thermal, stats.ema_loss_rgb
    delta = (lt - lr) / (lt + lr + g.eps)
    rb = float(np.clip(g.gamma_r * delta, -g.r_cap, g.r_cap))
    mu_bias = -float(np.clip(g.gamma_mu * delta, -g.mu_cap, g.mu_cap))
    budget = MaskBudget(base_ratio, {"rgb": rb, "thermal": -rb})
    return budget, mu_bias


_POINT_MASS = {"low_cmss": 0.0, "high_cmss": 1.0}


def baseline_mask(mode: str, cmss: CmssMap, r: float, rng: np.random.Generator,
                  modality: str = "rgb") -> MaskPlan:
    if mode == "random":
        cfg = SamplerConfig(np.zeros(1), np.ones(1), np.ones(1), uniform=True, phase_label="random")
    elif mode in _POINT_MASS:
        cfg = SamplerConfig(np.array([_POINT_MASS[mode]]), np.zeros(1), np.ones(1),
                            phase_label=mode)
    else:
        raise ValueError(f"unknown masking mode {mode!r}")
    return select_visible(cmss, cfg, MaskBudget(r), modality, rng)
