"""Dataset curation: SSIM quality scoring, temporal de-duplication, source balancing.

The manifest is JSON-lines. The first line is a header recording the
pipeline order and parameters; every following line is one image pair.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PIPELINE_ORDER = ("temporal_dedup", "quality_filter", "balance_sources")
DROP_REASONS = ("low_ssim", "temporal_dup", "balance_cap", "none")
IMAGE_EXTS = (".png", ".jpg", ".jpeg")
_STEM_RE = re.compile(r"^(?P<source>.+?)_(?P<seq>\d+)(?:_f(?P<frame>\d+))?$")


class ManifestError(ValueError):
    """Manifest file is missing, malformed, or has the wrong schema."""


# -- SSIM -------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim_map(a, b, win: int = 11, sigma: float = 1.5, data_range: float = 255.0):
    """Local SSIM over every fully contained window ('valid' region)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < win:
        raise ValueError(f"need 2-D images of at least {win}x{win}, got {a.shape}")
    g = gaussian_window(win, sigma)
    r = win // 2

    def filt(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:x.shape[0] - r, r:x.shape[1] - r]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, win: int = 11, sigma: float = 1.5, data_range: float = 255.0) -> float:
    return float(ssim_map(a, b, win, sigma, data_range).mean())


def to_gray(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    if rgb.shape[-1] == 1:
        return rgb[..., 0]
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def pair_quality(rgb: np.ndarray, thermal: np.ndarray, mode: str = "gray_vs_thermal") -> float:
    if mode == "gray_vs_thermal":
        return ssim(to_gray(rgb), to_gray(thermal))
    if mode == "thermal_vs_gray":
        return ssim(to_gray(thermal), to_gray(rgb))
    raise ValueError(f"unknown quality mode {mode!r}")


# -- manifest ---------------------------------------------------------------

@dataclass
class Record:
    rgb_path: str
    thermal_path: str
    source_id: str
    frame_index: Optional[int] = None
    ssim: float = 1.0
    kept: bool = True
    drop_reason: str = "none"
    sequence_id: Optional[str] = None
    mask_path: Optional[str] = None

    def drop(self, reason: str) -> None:
        self.kept = False
        self.drop_reason = reason


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    header: dict = field(default_factory=dict)
    base_dir: Optional[Path] = None

    def kept(self) -> list:
        return [r for r in self.records if r.kept]

    def resolve(self, rel: Optional[str]) -> Optional[Path]:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def summary(self) -> dict:
        table: dict = defaultdict(Counter)
        for r in self.records:
            table[r.source_id][r.drop_reason] += 1
        return {s: dict(c) for s, c in sorted(table.items())}

    def summary_text(self) -> str:
        cols = list(DROP_REASONS)
        lines = ["source".ljust(16) + "".join(c.rjust(14) for c in cols)]
        for src, counts in self.summary().items():
            lines.append(src.ljust(16) + "".join(str(counts.get(c, 0)).rjust(14) for c in cols))
        lines.append(f"kept {len(self.kept())} / {len(self.records)}")
        return "\n".join(lines)


def write_manifest(m: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = {"type": "header", "version": MANIFEST_VERSION, **m.header}
    lines = [json.dumps(head, sort_keys=True)]
    lines += [json.dumps(asdict(r), sort_keys=True) for r in m.records]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    header, records = {}, []
    names = {f for f in Record.__dataclass_fields__}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{ln}: invalid JSON ({e})") from None
        if obj.get("type") == "header":
            header = obj
            continue
        missing = {"rgb_path", "thermal_path", "source_id"} - set(obj)
        if missing:
            raise ManifestError(f"{path}:{ln}: missing fields {sorted(missing)}")
        if obj.get("drop_reason", "none") not in DROP_REASONS:
            raise ManifestError(f"{path}:{ln}: bad drop_reason {obj['drop_reason']!r}")
        records.append(Record(**{k: v for k, v in obj.items() if k in names}))
    return Manifest(records, header, path.parent)


# -- pipeline stages --------------------------------------------------------

def quality_filter(m: Manifest, threshold: float = 0.80) -> Manifest:
    for r in m.records:
        if r.kept and r.ssim < threshold:
            r.drop("low_ssim")
    return m


def temporal_dedup(frames: list, sim_threshold: float = 0.95, sim=None) -> list[int]:
    """Greedy scan over frames sorted by time; returns kept positions.

    A frame is kept iff its similarity to the last kept frame is below
    ``sim_threshold``. ``sim`` defaults to SSIM on grayscale.
    """
    sim = sim or (lambda x, y: ssim(to_gray(x), to_gray(y)))
    if not frames:
        return []
    kept = [0]
    last = frames[0]
    for i in range(1, len(frames)):
        if sim(frames[i], last) < sim_threshold:
            kept.append(i)
            last = frames[i]
    return kept


def stride_dedup(n_frames: int, stride: int) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, n_frames, stride))


def balance_sources(m: Manifest, cap_fraction: float = 0.2,
                    rng: np.random.Generator | None = None) -> Manifest:
    """Subsample any source holding more than ``cap_fraction`` of kept pairs.

    Repeats until no source exceeds the cap. A cap below ``1 / n_sources``
    is unsatisfiable, so it is raised to that value (sources equalized).
    """
    if not 0.0 < cap_fraction <= 1.0:
        raise ValueError("cap_fraction must lie in (0, 1]")
    rng = rng or np.random.default_rng(0)
    while True:
        by_src: dict = defaultdict(list)
        for r in m.kept():
            by_src[r.source_id].append(r)
        total = sum(len(v) for v in by_src.values())
        cap = max(cap_fraction, 1.0 / max(len(by_src), 1))
        if total == 0 or cap >= 1.0:
            return m
        over = [s for s in sorted(by_src) if len(by_src[s]) > cap * total]
        if not over:
            return m
        src = max(over, key=lambda s: len(by_src[s]))
        others = total - len(by_src[src])
        # largest count c with c <= cap * (others + c)
        target = int(np.floor(cap * others / (1.0 - cap) + 1e-9))
        pool = by_src[src]
        drop = rng.choice(len(pool), size=len(pool) - target, replace=False)
        for i in sorted(drop):
            pool[i].drop("balance_cap")


def _pair_files(root: Path) -> tuple[list[tuple[str, Path, Path]], list[str]]:
    def index(d: Path):
        if not d.is_dir():
            return {}
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}

    rgb, th = index(root / "rgb"), index(root / "thermal")
    unpaired = sorted(set(rgb) ^ set(th))
    return [(s, rgb[s], th[s]) for s in sorted(set(rgb) & set(th))], unpaired


def _parse_stem(stem: str, root: Path) -> tuple[str, Optional[str], Optional[int]]:
    mt = _STEM_RE.match(stem)
    if not mt:
        return root.name, None, None
    frame = mt.group("frame")
    seq = f"{mt.group('source')}_{mt.group('seq')}" if frame is not None else None
    return mt.group("source"), seq, int(frame) if frame is not None else None


def build_manifest(roots, out_path=None, ssim_threshold: float = 0.80,
                   dedup_threshold: float = 0.95, cap_fraction: float = 0.2,
                   seed: int = 0, quality_mode: str = "gray_vs_thermal",
                   dedup_mode: str = "similarity", stride: int = 1,
                   workers: int = 1) -> Manifest:
    """Pair files under ``<root>/rgb`` and ``<root>/thermal`` and run the pipeline.

    Stems of the form ``<source>_<seq>_f<frame>`` are video frames; stems
    ``<source>_<n>`` are stills of that source. Anything else takes the root
    directory name as its source.
    """
    from .data import load_gray, load_image

    base = Path(out_path).resolve().parent if out_path else None
    records, files = [], []
    for root in map(Path, roots):
        if not root.is_dir():
            raise ManifestError(f"root is not a directory: {root}")
        pairs, unpaired = _pair_files(root)
        for s in unpaired:
            log.warning("unpaired file stem %r under %s", s, root)
        for stem, rp, tp in pairs:
            source, seq, frame = _parse_stem(stem, root)
            mp = root / "masks" / f"{stem}.png"
            rel = (lambda p: str(Path(p).resolve().relative_to(base))
                   if base and _is_under(p, base) else str(Path(p).resolve()))
            records.append(Record(rel(rp), rel(tp), source, frame, sequence_id=seq,
                                  mask_path=rel(mp) if mp.is_file() else None))
            files.append((rp, tp))
    src_rgb = {id(r): f[0] for r, f in zip(records, files)}

    def score(f):
        return round(pair_quality(load_image(f[0]), load_image(f[1]), quality_mode), 12)

    if workers > 1 and records:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as ex:
            scores = list(ex.map(score, files))
    else:
        scores = [score(f) for f in files]
    for r, s in zip(records, scores):
        r.ssim = s

    seqs: dict = defaultdict(list)
    for r in records:
        if r.sequence_id is not None:
            seqs[r.sequence_id].append(r)
    for sid in sorted(seqs):
        frames = sorted(seqs[sid], key=lambda r: r.frame_index)
        if dedup_mode == "stride":
            keep = set(stride_dedup(len(frames), stride))
        elif dedup_mode == "similarity":
            imgs = [load_gray(src_rgb[id(r)]) for r in frames]
            keep = set(temporal_dedup(imgs, dedup_threshold, sim=ssim))
        else:
            raise ValueError(f"unknown dedup mode {dedup_mode!r}")
        for i, r in enumerate(frames):
            if i not in keep:
                r.drop("temporal_dup")

    m = Manifest(records, {
        "pipeline": list(PIPELINE_ORDER),
        "ssim_threshold": ssim_threshold, "dedup_threshold": dedup_threshold,
        "dedup_mode": dedup_mode, "stride": stride, "cap_fraction": cap_fraction,
        "quality_mode": quality_mode, "seed": seed,
    }, base)
    quality_filter(m, ssim_threshold)
    balance_sources(m, cap_fraction, np.random.default_rng(np.random.SeedSequence([seed, 7])))
    if out_path:
        write_manifest(m, out_path)
    return m


def _is_under(p, base: Path) -> bool:
    try:
        Path(p).resolve().relative_to(base)
        return True
    except ValueError:
        return False
