"""Distributional and pointwise scores for generated profiles."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

PLE_LEVELS = (0.9985, 0.0015)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# MMD


def median_bandwidth(Z: np.ndarray) -> float:
    """Median pairwise Euclidean distance; 1.0 (with a warning) if it is zero."""
    med = float(np.median(pdist(Z))) if Z.shape[0] > 1 else 0.0
    if med <= 0:
        warnings.warn("median pairwise distance is zero; using bandwidth 1.0", RuntimeWarning, stacklevel=3)
        return 1.0
    return med


def rbf(sqdist: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sqdist / (2.0 * bandwidth**2))


def mmd(X, Y, bandwidth: float | None = None) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel.

    Sums are exactly rounded (``math.fsum``), so two copies of the same
    multiset give exactly 0 regardless of order.
    """
    X, Y = _as_2d(X), _as_2d(Y)
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ValueError("need at least two profiles per set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"profile lengths differ: {X.shape[1]} vs {Y.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(np.vstack([X, Y]))
    kxx = math.fsum(rbf(cdist(X, X, "sqeuclidean"), bandwidth).ravel()) / X.shape[0] ** 2
    kyy = math.fsum(rbf(cdist(Y, Y, "sqeuclidean"), bandwidth).ravel()) / Y.shape[0] ** 2
    kxy = math.fsum(rbf(cdist(X, Y, "sqeuclidean"), bandwidth).ravel()) / (X.shape[0] * Y.shape[0])
    return max(kxx + kyy - 2.0 * kxy, 0.0)


@dataclass
class MmdResult:
    mmd: float
    p_value: float
    n_permutations: int
    bandwidth: float
    permuted_stats: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def histogram(self, bins: int = 30) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.permuted_stats, bins=bins)


def permutation_test(X, Y, n_permutations: int = 1000, seed: int = 0, bandwidth: float | None = None) -> MmdResult:
    """Permutation p-value ``(1 + #{perm stat >= observed}) / (n + 1)``.

    The kernel matrix over the pooled sample is built once with one bandwidth
    and reused for every re-partition.
    """
    if n_permutations < 99:
        raise ValueError("use at least 99 permutations")
    X, Y = _as_2d(X), _as_2d(Y)
    Z = np.vstack([X, Y])
    n, m = X.shape[0], Y.shape[0]
    if bandwidth is None:
        bandwidth = median_bandwidth(Z)
    z = mmd(X, Y, bandwidth)
    K = rbf(cdist(Z, Z, "sqeuclidean"), bandwidth)

    rng = np.random.default_rng(seed)
    stats = np.empty(n_permutations)
    chunk = 256
    for s in range(0, n_permutations, chunk):
        e = min(s + chunk, n_permutations)
        W = np.full((e - s, n + m), -1.0 / m)
        for r in range(e - s):
            W[r, rng.permutation(n + m)[:n]] = 1.0 / n
        stats[s:e] = np.maximum(np.einsum("pi,ij,pj->p", W, K, W), 0.0)
    p = (1 + int(np.sum(stats >= z))) / (n_permutations + 1)
    return MmdResult(mmd=z, p_value=p, n_permutations=n_permutations, bandwidth=bandwidth, permuted_stats=stats)


# ---------------------------------------------------------------------------
# CRPS / PLE


def crps(members, target, *, valid_len: int | None = None, per_step: bool = False):
    """Empirical-CDF CRPS ``mean|X - x| - 0.5 mean|X - X'|`` per coordinate.

    ``members`` has shape ``(m, T)`` (or ``(m,)`` for a scalar target).
    Returns the mean over valid steps, or the per-step vector.
    """
    ens = np.asarray(members, dtype=np.float64)
    obs = np.asarray(target, dtype=np.float64)
    if ens.ndim == obs.ndim:
        ens = ens[None]
    if ens.shape[0] < 1:
        raise ValueError("ensemble is empty")
    if valid_len is not None:
        ens, obs = ens[..., :valid_len], obs[..., :valid_len]
    m = ens.shape[0]
    skill = np.abs(ens - obs).mean(axis=0)
    # sum_{j,k} |x_j - x_k| via sorted members: 2 * sum_i (2i - m + 1) x_(i)
    srt = np.sort(ens, axis=0)
    w = (2 * np.arange(m) - m + 1).reshape((m,) + (1,) * (ens.ndim - 1))
    spread = 2.0 * (w * srt).sum(axis=0) / (2.0 * m * m)
    score = skill - spread
    if per_step or score.ndim == 0:
        return score if per_step else float(score)
    return float(score.mean())


def quantile(x, alpha: float, valid_len: int | None = None) -> float:
    """Linear-interpolation quantile of the valid steps (rank ``alpha (V-1)``)."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    x = x[..., :valid_len] if valid_len is not None else x
    if x.shape[-1] == 0:
        raise ValueError("empty profile")
    return np.quantile(x, alpha, axis=-1, method="linear")


def ple(members, target, valid_len: int | None = None, levels=PLE_LEVELS) -> float:
    """CRPS of the members' extreme quantiles against the target's, summed over ``levels``."""
    ens = np.atleast_2d(np.asarray(members, dtype=np.float64))
    total = 0.0
    for a in levels:
        total += crps(quantile(ens, a, valid_len), quantile(target, a, valid_len))
    return float(total)


def condition_rmse(samples, targets, valid_len: int | None = None, *, peak: str = "max") -> dict[str, float]:
    """RMSE of achieved vs targeted peak and average; ``peak='min'`` for generation-dominated profiles.

    ``targets`` is a sequence of ``(peak, avg)`` pairs, one per sample.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    x = x[:, :valid_len] if valid_len is not None else x
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    achieved_peak = x.max(axis=1) if peak == "max" else x.min(axis=1)
    return {
        "rmse_peak": float(np.sqrt(np.mean((achieved_peak - tgt[:, 0]) ** 2))),
        "rmse_avg": float(np.sqrt(np.mean((x.mean(axis=1) - tgt[:, 1]) ** 2))),
    }


def summarize(values) -> dict[str, float]:
    """Mean / best (lowest) / worst (highest) of per-sample scores."""
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "best": float(v.min()), "worst": float(v.max())}
