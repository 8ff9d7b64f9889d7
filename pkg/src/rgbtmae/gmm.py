"""Online 1-D Gaussian mixture fit of the CMSS distribution.

Each training iteration runs one E+M step on the batch's CMSS samples and
blends the batch estimate into the running state with damping ``eta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

VAR_FLOOR = 1e-4
EMPTY_MASS = 1e-8
STEADY_TOL = 1e-3
STEADY_ITERS = 50
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GmmState:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    iterations_seen: int = 0
    steady: bool = False
    stable_streak: int = 0

    @property
    def K(self) -> int:
        return int(self.means.shape[0])

    def sorted(self) -> "GmmState":
        order = np.argsort(self.means, kind="stable")
        return replace(self, weights=self.weights[order], means=self.means[order],
                       variances=self.variances[order])

    def to_dict(self) -> dict:
        return {
            "weights": [float(x) for x in self.weights],
            "means": [float(x) for x in self.means],
            "variances": [float(x) for x in self.variances],
            "iterations_seen": int(self.iterations_seen),
            "steady": bool(self.steady),
            "stable_streak": int(self.stable_streak),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmState":
        return cls(np.asarray(d["weights"], dtype=np.float64),
                   np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["variances"], dtype=np.float64),
                   int(d.get("iterations_seen", 0)), bool(d.get("steady", False)),
                   int(d.get("stable_streak", 0)))


@dataclass
class Responsibilities:
    alpha: np.ndarray  # (n, K)
    log_norm: np.ndarray = field(repr=False)  # per-sample log p(m_i)


def init_gmm(K: int = 3) -> GmmState:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    k = np.arange(K, dtype=np.float64)
    return GmmState(np.full(K, 1.0 / K), (k + 0.5) / K, np.full(K, 0.05))


def _log_joint(state: GmmState, x: np.ndarray) -> np.ndarray:
    var = state.variances[None, :]
    d = x[:, None] - state.means[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(state.weights)[None, :]
    return logw - 0.5 * (LOG_2PI + np.log(var) + d * d / var)


def e_step(state: GmmState, samples) -> Responsibilities:
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("e_step needs at least one sample")
    lj = _log_joint(state, x)
    top = lj.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(lj - top).sum(axis=1))
    alpha = np.exp(lj - log_norm[:, None])
    alpha /= alpha.sum(axis=1, keepdims=True)
    return Responsibilities(alpha, log_norm)


def log_likelihood(state: GmmState, samples) -> float:
    return float(e_step(state, samples).log_norm.sum())


def m_step(resp: Responsibilities, samples, prev: GmmState | None = None,
           var_floor: float = VAR_FLOOR) -> GmmState:
    """Batch maximum-likelihood update. Empty components keep ``prev`` values."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    a = resp.alpha
    if a.shape[0] != x.shape[0]:
        raise ValueError("responsibilities and samples differ in length")
    n = x.shape[0]
    nk = a.sum(axis=0)
    safe = np.where(nk > EMPTY_MASS, nk, 1.0)
    means = (a * x[:, None]).sum(axis=0) / safe
    variances = (a * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / safe
    weights = nk / n
    empty = nk <= EMPTY_MASS
    if empty.any() and prev is not None:
        means[empty] = prev.means[empty]
        variances[empty] = prev.variances[empty]
        weights[empty] = prev.weights[empty]
    weights = weights / weights.sum()
    variances = np.maximum(variances, var_floor)
    out = GmmState(weights, np.clip(means, 0.0, 1.0), variances)
    if prev is not None:
        out.iterations_seen = prev.iterations_seen
    return out


def em_step(state: GmmState, samples) -> GmmState:
    return m_step(e_step(state, samples), samples, prev=state)


def damped_update(old: GmmState, batch_est: GmmState, eta: float = 0.05) -> GmmState:
    if old.K != batch_est.K:
        raise ValueError("component counts differ")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if eta == 0.0:
        return replace(old)
    o, b = old.sorted(), batch_est.sorted()
    if eta == 1.0:
        w, mu, var = b.weights.copy(), b.means.copy(), b.variances.copy()
    else:
        w = (1.0 - eta) * o.weights + eta * b.weights
        mu = (1.0 - eta) * o.means + eta * b.means
        var = (1.0 - eta) * o.variances + eta * b.variances
    w = w / w.sum()
    change = max(np.abs(w - o.weights).max(), np.abs(mu - o.means).max(),
                 np.abs(var - o.variances).max())
    streak = old.stable_streak + 1 if change < STEADY_TOL else 0
    new = GmmState(w, mu, var, old.iterations_seen + 1,
                   old.steady or streak >= STEADY_ITERS, streak)
    return new.sorted()


def pdf(state: GmmState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    dens = np.exp(_log_joint(state, flat)).sum(axis=1)
    return dens.reshape(x.shape)


def cdf(weights, means, variances, x) -> np.ndarray:
    from scipy.special import ndtr

    x = np.asarray(x, dtype=np.float64)
    z = (x[..., None] - np.asarray(means)) / np.sqrt(np.asarray(variances))
    return (ndtr(z) * np.asarray(weights)).sum(axis=-1)


def fit_stream(state: GmmState, batches, eta: float = 0.05) -> GmmState:
    for batch in batches:
        state = damped_update(state, em_step(state, batch), eta)
    return state
