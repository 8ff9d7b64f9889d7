"""Deterministic synthetic RGB/thermal scenes with known object masks.

Backgrounds are a smooth luminance gradient shared by both modalities plus a
little sensor noise. Objects are textured, colored shapes in RGB and warm,
slightly blurred blobs in thermal, so they are the places where the two
modalities disagree and carry structure.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .patchgrid import RgbtPair


@dataclass
class SceneSpec:
    img_size: int = 48
    objects_min: int = 1
    objects_max: int = 3
    object_scale: tuple = (0.15, 0.35)  # side length as a fraction of img_size
    background_level: tuple = (0.6, 0.75)
    gradient_amplitude: float = 0.08
    background_noise: float = 0.004
    tint: float = 0.03
    texture_amplitude: float = 0.25
    hot_offset: float = 0.2
    thermal_texture: float = 0.3  # fraction of the RGB texture leaking into thermal
    thermal_blur: float = 1.0
    thermal_noise: float = 0.004
    distractors: int = 0  # thermal-only warm spots with no RGB counterpart
    n_sources: int = 4
    frames_per_sequence: int = 1
    drift_px: float = 0.5
    low_quality_fraction: float = 0.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def _grid(n):
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def _shape_mask(n, cy, cx, hy, hx, kind, angle):
    yy, xx = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dy + sa * dx, -sa * dy + ca * dx
    if kind == 0:
        return (np.abs(u) <= hy) & (np.abs(v) <= hx)
    return (u / hy) ** 2 + (v / hx) ** 2 <= 1.0


@dataclass
class _Obj:
    cy: float
    cx: float
    hy: float
    hx: float
    kind: int
    angle: float
    color: np.ndarray
    freq: float
    orient: float
    phase: float
    vy: float
    vx: float


def _draw_scene(spec: SceneSpec, rng: np.random.Generator):
    n = spec.img_size
    lo, hi = spec.background_level
    level = rng.uniform(lo, hi)
    theta = rng.uniform(0, 2 * np.pi)
    tint = rng.uniform(-spec.tint, spec.tint, size=3)
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    objs = []
    for _ in range(n_obj):
        side = rng.uniform(*spec.object_scale) * n
        aspect = rng.uniform(0.7, 1.4)
        hy, hx = side / 2 * np.sqrt(aspect), side / 2 / np.sqrt(aspect)
        objs.append(_Obj(
            cy=rng.uniform(hy, n - hy), cx=rng.uniform(hx, n - hx), hy=hy, hx=hx,
            kind=int(rng.integers(0, 2)), angle=rng.uniform(0, np.pi),
            color=rng.uniform(0.2, 0.8, size=3), freq=rng.uniform(0.6, 1.4),
            orient=rng.uniform(0, np.pi), phase=rng.uniform(0, 2 * np.pi),
            vy=rng.normal(0, 1), vx=rng.normal(0, 1),
        ))
    spots = [(rng.uniform(0, n), rng.uniform(0, n), rng.uniform(0.1, 0.2) * n)
             for _ in range(spec.distractors)]
    return level, theta, tint, objs, spots


def _render(spec: SceneSpec, scene, frame: int, rng: np.random.Generator) -> RgbtPair:
    n = spec.img_size
    level, theta, tint, objs, spots = scene
    gy, gx = _grid(n)
    ramp = spec.gradient_amplitude * (np.cos(theta) * gy + np.sin(theta) * gx)
    bg = level + ramp
    rgb = np.repeat(bg[..., None], 3, axis=2) + tint
    thermal = bg.copy()
    mask = np.zeros((n, n), dtype=bool)
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for o in objs:
        d = frame * spec.drift_px
        m = _shape_mask(n, o.cy + d * o.vy, o.cx + d * o.vx, o.hy, o.hx, o.kind, o.angle)
        w = o.freq * (np.cos(o.orient) * yy + np.sin(o.orient) * xx) + o.phase
        tex = spec.texture_amplitude * np.sign(np.sin(w))
        rgb[m] = o.color + tex[m][:, None]
        thermal[m] = bg[m] + spec.hot_offset + spec.thermal_texture * tex[m]
        mask |= m
    for sy, sx, r in spots:
        blob = np.exp(-((yy - sy) ** 2 + (xx - sx) ** 2) / (2 * r * r))
        thermal += spec.hot_offset * blob
    if spec.thermal_blur > 0:
        thermal = gaussian_filter(thermal, spec.thermal_blur, mode="nearest")
    rgb += rng.normal(0, spec.background_noise, size=rgb.shape)
    thermal += rng.normal(0, spec.thermal_noise, size=thermal.shape)
    to8 = lambda a: np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    return RgbtPair(to8(rgb), to8(thermal)[..., None], object_mask=mask)


def _corrupt(pair: RgbtPair, rng: np.random.Generator) -> RgbtPair:
    """Low-quality pair: thermal replaced by unrelated noise."""
    t = rng.integers(0, 256, size=pair.thermal.shape).astype(np.uint8)
    return RgbtPair(pair.rgb, t, pair.source_id, pair.frame_index, pair.object_mask)


def generate_pairs(spec: SceneSpec, n: int) -> list[tuple[str, RgbtPair, dict]]:
    """In-memory corpus: (stem, pair, ground-truth metadata) triples."""
    if n <= 0:
        raise ValueError("n must be positive")
    out = []
    per_seq = max(1, spec.frames_per_sequence)
    n_seq = -(-n // per_seq)
    i = 0
    for s in range(n_seq):
        seq_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, s]))
        scene = _draw_scene(spec, seq_rng)
        source = f"src{s % max(1, spec.n_sources)}"
        lowq = seq_rng.random() < spec.low_quality_fraction
        for f in range(per_seq):
            if i >= n:
                break
            frng = np.random.default_rng(np.random.SeedSequence([spec.seed, s, f, 1]))
            pair = _render(spec, scene, f, frng)
            if lowq:
                pair = _corrupt(pair, frng)
            if per_seq > 1:
                stem = f"{source}_{s:05d}_f{f:04d}"
                pair.frame_index = f
            else:
                stem = f"{source}_{s:05d}"
            pair.source_id = source
            meta = {"stem": stem, "source_id": source, "frame_index": pair.frame_index,
                    "n_objects": len(scene[3]), "low_quality": bool(lowq),
                    "object_fraction": float(pair.object_mask.mean())}
            out.append((stem, pair, meta))
            i += 1
    return out


def generate_corpus(spec: SceneSpec, n: int, out_dir) -> Path:
    out = Path(out_dir)
    for sub in ("rgb", "thermal", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for stem, pair, meta in generate_pairs(spec, n):
        Image.fromarray(pair.rgb, "RGB").save(out / "rgb" / f"{stem}.png")
        Image.fromarray(pair.thermal[..., 0], "L").save(out / "thermal" / f"{stem}.png")
        Image.fromarray(pair.object_mask.astype(np.uint8) * 255, "L").save(
            out / "masks" / f"{stem}.png")
        lines.append(json.dumps(meta, sort_keys=True))
    (out / "meta.jsonl").write_text("\n".join(lines) + "\n")
    spec_d = asdict(spec)
    (out / "scene_spec.json").write_text(json.dumps(spec_d, sort_keys=True, indent=1) + "\n")
    return out
