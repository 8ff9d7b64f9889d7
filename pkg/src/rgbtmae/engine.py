"""Pre-training loop.

Every stochastic choice is drawn from a generator seeded by
``(seed, iteration, role, ...)``, so a run resumed from a checkpoint
continues exactly like the unbroken run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .cmss import cmss_from_arrays
from .data import InputNorm, PairDataset, augment_pair, to_tensors
from .gmm import GmmState, damped_update, em_step, init_gmm
from .masking import (
    MASK_MODES,
    BiasGains,
    LossStats,
    MaskBudget,
    ScheduleConfig,
    baseline_mask,
    schedule_at,
    select_visible,
    update_modality_bias,
)
from .model import PRESETS, ModelConfig, SiameseMAE, build_model, normalize_patch_targets, \
    reconstruction_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    preset: str = "desk"
    img_size: int = 48
    patch_size: int = 8
    epochs: int = 50
    total_iterations: int = 0  # 0: epochs * ceil(N / batch_size)
    batch_size: int = 128
    base_lr: float = 1.5e-4
    lr_scale_batch: bool = True  # absolute lr = base_lr * batch_size / 256
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    mask_ratio: float = 0.9
    crop_min: float = 0.2
    crop_max: float = 1.0
    flip_prob: float = 0.5
    gmm_k: int = 3
    gmm_eta: float = 0.05
    warmup_end: float = 0.05
    ramp_in_end: float = 0.5
    init_variance: float = 0.01
    masking: str = "gmm_cmss"
    complementary: bool = False
    gamma_r: float = 0.1
    gamma_mu: float = 0.2
    ema_decay: float = 0.99
    cmss_eps: float = 1e-6
    norm_mean: float = 0.5
    norm_std: float = 0.25
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.masking not in MASK_MODES:
            raise ValueError(f"masking must be one of {MASK_MODES}, got {self.masking!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ValueError("need 0 < crop_min <= crop_max <= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.total_iterations < 0:
            raise ValueError("batch_size and epochs must be positive")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(PRESETS[self.preset], img_size=self.img_size,
                                   patch_size=self.patch_size)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.warmup_end, self.ramp_in_end, self.init_variance)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = _coerce(v, type(getattr(cls(), k)))
        return cls(**kw)


def _coerce(v, typ):
    if isinstance(v, str):
        if typ is bool:
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {v!r}")
        if typ in (int, float):
            return typ(float(v)) if typ is int and "e" in v.lower() else typ(v)
        return v
    if typ is float:
        return float(v)
    return v


def parse_kv(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> TrainConfig:
    d = parse_kv(Path(path).read_text()) if path else {}
    d.update(overrides or {})
    return TrainConfig.from_dict(d)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def step_rng(seed: int, iteration: int, role: str, *extra: int) -> np.random.Generator:
    key = [int(seed), int(iteration), zlib.crc32(role.encode())] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))


def lr_at(cfg: TrainConfig, iteration: int, total: int) -> float:
    """Linear warmup then half-cycle cosine; reaches 0 on the last iteration."""
    lr = cfg.base_lr * (cfg.batch_size / 256.0 if cfg.lr_scale_batch else 1.0)
    warm = int(round(cfg.warmup_frac * total))
    if iteration < warm:
        return lr * (iteration + 1) / warm
    span = max(total - 1 - warm, 1)
    t = min(max(iteration - warm, 0) / span, 1.0)
    return lr * 0.5 * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: SiameseMAE, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim <= 1 or name.endswith("mask_token") else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2))


@dataclass
class TrainState:
    cfg: TrainConfig
    model: SiameseMAE
    optimizer: torch.optim.AdamW
    gmm: GmmState
    stats: LossStats
    iteration: int = 0
    total_iterations: int = 1
    extra: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, n_pairs: int) -> TrainState:
    model = build_model(cfg.model_config(), cfg.seed)
    total = cfg.total_iterations or cfg.epochs * math.ceil(n_pairs / cfg.batch_size)
    return TrainState(cfg, model, make_optimizer(model, cfg), init_gmm(cfg.gmm_k),
                      LossStats(ema_decay=cfg.ema_decay), 0, total)


def progress_of(state: TrainState) -> float:
    return min(state.iteration / max(state.total_iterations - 1, 1), 1.0)


def _plans(state: TrainState, cmss_maps, sampler, budget, mu_bias, it):
    cfg = state.cfg
    plans = {"rgb": [], "thermal": []}
    for i, cm in enumerate(cmss_maps):
        prev = None
        for mi, mod in enumerate(("rgb", "thermal")):
            rng = step_rng(cfg.seed, it, "mask", i, mi)
            if cfg.masking == "gmm_cmss":
                excl = prev.visible.reshape(-1) if (cfg.complementary and prev is not None) else None
                plan = select_visible(cm, sampler.with_bias(mu_bias), budget, mod, rng,
                                      exclude=excl)
            else:
                plan = baseline_mask(cfg.masking, cm, cfg.mask_ratio, rng, mod)
            plans[mod].append(plan)
            prev = plan
    return plans


def _index_tensors(plans):
    vis = torch.from_numpy(np.stack([p.visible_idx for p in plans]).astype(np.int64))
    masked = torch.from_numpy(np.stack([p.masked.reshape(-1) for p in plans]))
    return vis, masked


def train_step(state: TrainState, pairs: list) -> tuple[TrainState, dict]:
    """One optimization step on a batch of raw (un-augmented) pairs."""
    cfg, model, it = state.cfg, state.model, state.iteration
    norm = InputNorm(cfg.norm_mean, cfg.norm_std)
    aug = [augment_pair(p, step_rng(cfg.seed, it, "augment", i), cfg.img_size,
                        (cfg.crop_min, cfg.crop_max), flip_prob=cfg.flip_prob)
           for i, p in enumerate(pairs)]
    rgb, th = to_tensors(np.stack([p.rgb for p in aug]), np.stack([p.thermal for p in aug]), norm)
    px_r, px_t = model.patchify(rgb), model.patchify(th)

    # (1)-(2) CMSS on the current shared projection, no gradient
    with torch.no_grad():
        e_r = model.embed(px_r).double().numpy()
        e_t = model.embed(px_t).double().numpy()
    maps = [cmss_from_arrays(a, b, cfg.cmss_eps) for a, b in zip(e_r, e_t)]
    samples = np.concatenate([m.flat for m in maps])

    # (3) mixture update precedes mask selection
    state.gmm = damped_update(state.gmm, em_step(state.gmm, samples), cfg.gmm_eta)

    # (4)-(5) schedule, modality balance, masks
    progress = progress_of(state)
    sampler = schedule_at(progress, state.gmm, cfg.schedule())
    if cfg.masking == "gmm_cmss":
        budget, mu_bias = update_modality_bias(
            state.stats, BiasGains(cfg.gamma_r, cfg.gamma_mu), cfg.mask_ratio)
    else:
        budget, mu_bias = MaskBudget(cfg.mask_ratio), 0.0
    plans = _plans(state, maps, sampler, budget, mu_bias, it)
    vis_r, masked_r = _index_tensors(plans["rgb"])
    vis_t, masked_t = _index_tensors(plans["thermal"])

    # (6) optimization step
    lr = lr_at(cfg, it, state.total_iterations)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    model.train()
    pred_r, pred_t = model(px_r, px_t, vis_r, vis_t)
    loss, l_r, l_t = reconstruction_loss(pred_r, pred_t, normalize_patch_targets(px_r),
                                         normalize_patch_targets(px_t), masked_r, masked_t)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.stats = state.stats.update(l_r.item(), l_t.item())

    # (7) metrics
    vis_mean = {mod: float(np.mean([m.flat[p.visible_idx].mean()
                                    for m, p in zip(maps, plans[mod])]))
                for mod in ("rgb", "thermal")}
    metrics = {
        "iteration": it, "progress": progress, "phase": sampler.phase_label, "lr": lr,
        "loss": loss.item(), "loss_rgb": l_r.item(), "loss_thermal": l_t.item(),
        "ema_rgb": state.stats.ema_loss_rgb, "ema_thermal": state.stats.ema_loss_thermal,
        "r_bias_rgb": budget.r_bias["rgb"], "r_bias_thermal": budget.r_bias["thermal"],
        "mu_bias": mu_bias,
        "visible_rgb": int(vis_r.shape[1]), "visible_thermal": int(vis_t.shape[1]),
        "visible_cmss_rgb": vis_mean["rgb"], "visible_cmss_thermal": vis_mean["thermal"],
        "cmss_mean": float(samples.mean()),
        "gmm": state.gmm.to_dict(),
        "sampler": {"uniform": sampler.uniform, "means": sampler.means.tolist(),
                    "variances": sampler.variances.tolist(),
                    "weights": sampler.weights.tolist()},
    }
    state.iteration += 1
    return state, metrics


def batch_indices(cfg: TrainConfig, n: int, iteration: int) -> np.ndarray:
    per_epoch = math.ceil(n / cfg.batch_size)
    epoch, k = divmod(iteration, per_epoch)
    order = step_rng(cfg.seed, epoch, "order").permutation(n)
    return order[k * cfg.batch_size:(k + 1) * cfg.batch_size]


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = {id(p): n for n, p in state.model.named_parameters()}
    arrays = {f"param/{k}": v.detach().cpu().numpy().astype(np.float32)
              for k, v in state.model.state_dict().items()}
    steps = {}
    for p, st in state.optimizer.state.items():
        n = names[id(p)]
        arrays[f"optim/{n}/exp_avg"] = st["exp_avg"].numpy()
        arrays[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
        steps[n] = float(st["step"])
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "model_config": state.cfg.model_config().to_dict(),
        "iteration": state.iteration,
        "total_iterations": state.total_iterations,
        "gmm": state.gmm.to_dict(),
        "loss_stats": asdict(state.stats),
        "optimizer_steps": steps,
        "param_shapes": {k: list(v.shape) for k, v in arrays.items() if k.startswith("param/")},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "meta"}
    return meta, arrays


def load_model(path) -> tuple[SiameseMAE, dict]:
    meta, arrays = read_checkpoint(path)
    model = SiameseMAE(ModelConfig(**meta["model_config"]))
    sd = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items()
          if k.startswith("param/")}
    model.load_state_dict(sd, strict=True)
    model.eval()
    return model, meta


def load_state(path) -> TrainState:
    meta, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    model, _ = load_model(path)
    opt = make_optimizer(model, cfg)
    for n, p in model.named_parameters():
        if n in meta["optimizer_steps"]:
            opt.state[p] = {
                "step": torch.tensor(meta["optimizer_steps"][n]),
                "exp_avg": torch.from_numpy(arrays[f"optim/{n}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{n}/exp_avg_sq"].copy()),
            }
    return TrainState(cfg, model, opt, GmmState.from_dict(meta["gmm"]),
                      LossStats(**meta["loss_stats"]), meta["iteration"],
                      meta["total_iterations"])


# -- driver -----------------------------------------------------------------

def run_pretraining(cfg: TrainConfig, dataset: PairDataset, out_dir, resume=None,
                    stop_at: Optional[int] = None, log_every: int = 0,
                    metrics_name: str = "metrics.jsonl") -> Path:
    """Train to completion (or ``stop_at``), writing metrics and checkpoints.

    Returns the path of the last checkpoint written.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_state(resume) if resume else init_state(cfg, len(dataset))
    if resume and state.cfg.to_dict() != cfg.to_dict():
        log.warning("resume config differs from checkpoint; using checkpoint config")
    cfg = state.cfg
    (out / "config.txt").write_text(dump_config(cfg))
    end = state.total_iterations if stop_at is None else min(stop_at, state.total_iterations)
    mode = "a" if resume else "w"
    t0 = time.time()
    with open(out / metrics_name, mode) as fh:
        while state.iteration < end:
            idx = batch_indices(cfg, len(dataset), state.iteration)
            state, m = train_step(state, [dataset.pair(int(i)) for i in idx])
            fh.write(json.dumps(m, sort_keys=True) + "\n")
            if log_every and state.iteration % log_every == 0:
                log.info("it %d/%d loss %.4f (rgb %.4f, t %.4f) phase %s %.1fs",
                         state.iteration, state.total_iterations, m["loss"], m["loss_rgb"],
                         m["loss_thermal"], m["phase"], time.time() - t0)
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0 \
                    and state.iteration < end:
                save_checkpoint(state, out / f"iter_{state.iteration:07d}.ckpt.npz")
    name = "final.ckpt.npz" if state.iteration >= state.total_iterations \
        else f"iter_{state.iteration:07d}.ckpt.npz"
    return save_checkpoint(state, out / name)
