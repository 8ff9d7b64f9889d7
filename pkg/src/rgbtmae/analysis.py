"""Fused-feature extraction, linear probing and object/background distances."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import InputNorm, patch_labels, to_tensors
from .kernels import w1_sorted
from .model import SiameseMAE
from .patchgrid import DimensionError, RgbtPair

log = logging.getLogger(__name__)


@dataclass
class FusedFeatures:
    features: np.ndarray  # (N, 2d, p, p): rgb channels first, thermal last
    checkpoint_id: str = ""

    @property
    def dim(self) -> int:
        return self.features.shape[1] // 2

    def patch_vectors(self, i: int) -> np.ndarray:
        """(p*p, 2d) row-major patch vectors of pair ``i``."""
        f = self.features[i]
        return f.reshape(f.shape[0], -1).T


def extract_fused(model: SiameseMAE, pairs: Sequence[RgbtPair], checkpoint_id: str = "",
                  norm: Optional[InputNorm] = None, batch_size: int = 128) -> FusedFeatures:
    """Encoder features of both modalities, channel-concatenated. No masking, no exchange."""
    cfg = model.cfg
    norm = norm or InputNorm()
    out = []
    model.eval()
    for s in range(0, len(pairs), batch_size):
        chunk = pairs[s:s + batch_size]
        for p in chunk:
            if p.rgb.shape[0] != cfg.img_size or p.rgb.shape[1] != cfg.img_size:
                raise DimensionError(
                    f"pair is {p.rgb.shape[:2]}, checkpoint expects {cfg.img_size}px")
        rgb, th = to_tensors(np.stack([p.rgb for p in chunk]),
                             np.stack([p.thermal for p in chunk]), norm)
        rgb = rgb.to(next(model.parameters()).dtype)
        th = th.to(rgb.dtype)
        B = rgb.shape[0]
        with torch.no_grad():
            # batch-dimension concatenation through the shared encoder
            z = model.encode_all(model.patchify(torch.cat([rgb, th], dim=0)))
        z_r, z_t = z[:B], z[B:]
        g = cfg.grid_side
        fused = torch.cat([z_r, z_t], dim=-1)  # (B, L, 2d)
        out.append(fused.transpose(1, 2).reshape(B, -1, g, g).double().numpy())
    return FusedFeatures(np.concatenate(out), checkpoint_id)


# -- probing ----------------------------------------------------------------

@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_test: int


def _balanced(idx: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pos, neg = idx[y[idx]], idx[~y[idx]]
    k = min(len(pos), len(neg))
    if k == 0:
        raise ValueError("probe split contains a single class")
    return np.sort(np.concatenate([rng.choice(pos, k, replace=False),
                                   rng.choice(neg, k, replace=False)]))


def fit_logistic(x: np.ndarray, y: np.ndarray, lr: float = 0.1,
                 iterations: int = 500) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on the mean logistic loss, zero init."""
    w = np.zeros(x.shape[1])
    b = 0.0
    yf = y.astype(np.float64)
    n = len(yf)
    for _ in range(iterations):
        z = x @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = p - yf
        w -= lr * (x.T @ g) / n
        b -= lr * g.mean()
    return w, b


def linear_probe(features, labels: np.ndarray, rng: np.random.Generator,
                 train_fraction: float = 0.7, lr: float = 0.1,
                 iterations: int = 500) -> ProbeResult:
    """Patch-level object/background probe on frozen features.

    ``features`` is a FusedFeatures or an (N, C, p, p) array, ``labels`` an
    (N, p, p) bool array. Pairs are split into train/test, then each side is
    subsampled to equal class counts so chance accuracy is 0.5.
    """
    f = features.features if isinstance(features, FusedFeatures) else np.asarray(features)
    labels = np.asarray(labels, dtype=bool)
    if f.shape[0] != labels.shape[0] or f.shape[2:] != labels.shape[1:]:
        raise DimensionError(f"features {f.shape} do not match labels {labels.shape}")
    N, C = f.shape[:2]
    if N < 2:
        raise ValueError("need at least two pairs to split")
    x = f.reshape(N, C, -1).transpose(0, 2, 1).reshape(-1, C)
    y = labels.reshape(-1)
    L = labels[0].size
    perm = rng.permutation(N)
    n_tr = min(max(int(round(train_fraction * N)), 1), N - 1)
    pair_tr, pair_te = np.sort(perm[:n_tr]), np.sort(perm[n_tr:])
    rows = lambda ps: (ps[:, None] * L + np.arange(L)).reshape(-1)
    tr = _balanced(rows(pair_tr), y, rng)
    te = _balanced(rows(pair_te), y, rng)
    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd
    w, b = fit_logistic(xs[tr], y[tr], lr, iterations)
    acc = lambda idx: float(np.mean(((xs[idx] @ w + b) > 0) == y[idx]))
    return ProbeResult(acc(te), acc(tr), len(tr), len(te))


def pair_labels(pairs: Sequence[RgbtPair], patch_size: int) -> np.ndarray:
    if any(p.object_mask is None for p in pairs):
        raise ValueError("all pairs need object masks")
    return np.stack([patch_labels(p.object_mask, patch_size) for p in pairs])


# -- distances ----------------------------------------------------------------

def random_directions(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal((n, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int = 64,
                       rng: Optional[np.random.Generator] = None,
                       directions: Optional[np.ndarray] = None) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise ValueError("both sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise DimensionError("feature dimensions differ")
    if directions is None:
        if a.shape[1] == 1:
            directions = np.ones((1, 1))
        else:
            directions = random_directions(a.shape[1], n_projections,
                                           rng or np.random.default_rng(0))
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    return float(np.mean([w1_sorted(np.ascontiguousarray(pa[:, k]),
                                    np.ascontiguousarray(pb[:, k]))
                          for k in range(directions.shape[0])]))


def object_background_distances(feats: FusedFeatures, labels: np.ndarray,
                                n_projections: int = 64, seed: int = 0) -> np.ndarray:
    """One distance per pair; NaN where a pair lacks either class."""
    out = np.full(feats.features.shape[0], np.nan)
    skipped = 0
    for i in range(len(out)):
        v = feats.patch_vectors(i)
        y = labels[i].reshape(-1)
        if y.all() or not y.any():
            skipped += 1
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out[i] = sliced_wasserstein(v[y], v[~y], n_projections, rng)
    if skipped:
        log.warning("skipped %d of %d samples lacking object or background patches",
                    skipped, len(out))
    return out


def wasserstein_report(models: dict, pairs: Sequence[RgbtPair], out_dir=None,
                       n_projections: int = 64, seed: int = 0) -> dict:
    """Object/background sliced-W1 distribution per model.

    ``models`` maps a name to a SiameseMAE. Returns name -> distances (skipped
    samples removed). With ``out_dir`` writes wasserstein.csv and a
    histogram PNG.
    """
    if not models:
        raise ValueError("need at least one checkpoint")
    res = {}
    for name, model in models.items():
        feats = extract_fused(model, pairs, name)
        labels = pair_labels(pairs, model.cfg.patch_size)
        d = object_background_distances(feats, labels, n_projections, seed)
        res[name] = d[~np.isnan(d)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "wasserstein.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["checkpoint", "sample", "sliced_w1"])
            for name, d in res.items():
                for i, v in enumerate(d):
                    w.writerow([name, i, f"{v:.10g}"])
        plot_histograms(res, out / "wasserstein_hist.png")
    return res


def plot_histograms(dists: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    allv = np.concatenate([d for d in dists.values() if len(d)]) if dists else np.zeros(1)
    bins = np.linspace(allv.min(), allv.max() + 1e-12, 40)
    for name, d in dists.items():
        ax.hist(d, bins=bins, alpha=0.5, label=name)
    ax.set_xlabel("sliced W1 (object vs background patches)")
    ax.set_ylabel("samples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# -- GMM trajectory -----------------------------------------------------------

def gmm_rows(metrics_path) -> list[dict]:
    """Flatten the per-iteration mixture parameters of a metrics log."""
    rows = []
    with open(metrics_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            m = json.loads(line)
            g = m["gmm"]
            for k in range(len(g["means"])):
                rows.append({"iteration": m["iteration"], "component": k,
                             "weight": g["weights"][k], "mean": g["means"][k],
                             "variance": g["variances"][k], "steady": g["steady"]})
    return rows


def write_gmm_csv(metrics_path, out_path) -> int:
    rows = gmm_rows(metrics_path)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "component", "weight", "mean",
                                           "variance", "steady"])
        w.writeheader()
        w.writerows(rows)
    return len(rows)
