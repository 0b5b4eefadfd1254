"""Non-learned reference methods: interpolation and algebraic scaling of a category mean."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

A_BRACKET = (1e-6, 1e3)


def _observed(x, missing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    if missing.shape != x.shape:
        raise ValueError("mask and profile shapes differ")
    obs = np.flatnonzero(~missing)
    if obs.size == 0:
        raise ValueError("no observed values to interpolate from")
    return x, missing, obs


def linear_interpolate(x, missing) -> np.ndarray:
    """Fill missing steps linearly between observed neighbours; constant beyond the ends."""
    x, missing, obs = _observed(x, missing)
    out = x.copy()
    out[missing] = np.interp(np.flatnonzero(missing), obs, x[obs])
    return out


def nearest_interpolate(x, missing) -> np.ndarray:
    """Copy the nearest observed step into each gap; ties go to the earlier step."""
    x, missing, obs = _observed(x, missing)
    out = x.copy()
    gaps = np.flatnonzero(missing)
    right = np.clip(np.searchsorted(obs, gaps), 0, obs.size - 1)
    left = np.clip(right - 1, 0, obs.size - 1)
    take_left = np.abs(gaps - obs[left]) <= np.abs(obs[right] - gaps)
    out[gaps] = x[np.where(take_left, obs[left], obs[right])]
    return out


def upsample(y, block_len: int, method: str = "linear") -> np.ndarray:
    """High-resolution guess from block means: block means sit at window centres."""
    y = np.asarray(y, dtype=np.float64)
    n = y.size * block_len
    if method == "nearest":
        return np.repeat(y, block_len)
    if method != "linear":
        raise ValueError(f"unknown method {method!r}")
    centres = np.arange(y.size) * block_len + (block_len - 1) / 2
    return np.interp(np.arange(n), centres, y)


# ---------------------------------------------------------------------------
# algebraic scaler


@dataclass
class ScalerModel:
    """Mean profile per ``(category, month)`` and its min-max normalized shape."""

    means: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    @property
    def categories(self) -> list[str]:
        return sorted({c for c, _ in self.means})

    def is_degenerate(self, category: str, month: int) -> bool:
        m = self.means[(category, month)]
        return bool(m.max() == m.min())

    def shape(self, category: str, month: int) -> np.ndarray:
        m = self.means[(category, month)]
        lo, hi = m.min(), m.max()
        if hi == lo:
            raise ValueError(f"mean profile of {category}/{month} is flat")
        return (m - lo) / (hi - lo)

    def to_json(self) -> str:
        doc: dict[str, dict[str, list[float]]] = defaultdict(dict)
        for (c, mth), prof in sorted(self.means.items()):
            doc[c][str(mth)] = [float(v) for v in prof]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ScalerModel":
        doc = json.loads(text)
        return cls({(c, int(m)): np.array(v) for c, months in doc.items() for m, v in months.items()})


def scaler_fit(train: Dataset) -> ScalerModel:
    """Average the valid part of every training profile per (category, month)."""
    groups: dict[tuple[str, int], list[np.ndarray]] = defaultdict(list)
    for p in train.profiles:
        groups[(p.category, p.month)].append(p.valid)
    means = {}
    for key, rows in groups.items():
        lengths = {r.size for r in rows}
        if len(lengths) != 1:
            raise ValueError(f"{key} mixes valid lengths {sorted(lengths)}")
        means[key] = np.mean(np.stack(rows), axis=0)
    return ScalerModel(means)


def _power_sum(shape: np.ndarray, a: float) -> float:
    return math.fsum(shape**a)


def solve_exponent(shape: np.ndarray, ratio: float, bracket=A_BRACKET, tol: float = 1e-10) -> float | None:
    """Root of ``sum_t shape_t^a = ratio`` by bisection on ``bracket``; None if no root there.

    The left side is decreasing in ``a`` for shapes in ``[0, 1]``.
    """
    lo, hi = bracket
    g_lo, g_hi = _power_sum(shape, lo) - ratio, _power_sum(shape, hi) - ratio
    if g_lo < 0 or g_hi > 0:
        return None
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        g = _power_sum(shape, mid) - ratio
        if abs(g) <= tol * 1e-3 or hi - lo <= 1e-15 * mid:
            return mid
        if g > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class ScalerResult:
    profile: np.ndarray
    exponent: float | None
    peak_constrained: bool


def scaler_generate(model: ScalerModel, category: str, month: int, y_max: float, y_sum: float) -> ScalerResult:
    """Profile ``shape**a * y_max`` whose max is ``y_max`` and sum is ``y_sum``.

    Falls back to scaling the mean profile to the target sum (peak left free)
    when the exponent has no root in the bracket.
    """
    if not y_max > 0:
        raise ValueError(f"target maximum must be positive, got {y_max}")
    if model.is_degenerate(category, month):
        raise ValueError(f"mean profile of {category}/{month} is flat")
    shape = model.shape(category, month)
    a = solve_exponent(shape, y_sum / y_max)
    if a is None:
        return ScalerResult(average_scaling(model, category, month, y_sum), None, False)
    return ScalerResult(shape**a * y_max, a, True)


def average_scaling(model: ScalerModel, category: str, month: int, y_sum: float) -> np.ndarray:
    mean = model.means[(category, month)]
    total = math.fsum(mean)
    if total == 0:
        raise ValueError(f"mean profile of {category}/{month} sums to zero")
    return mean * (y_sum / total)
