"""Constraint maps y = f(x) and their projections for guided sampling.

All operators act on the valid prefix ``x[..., :valid_len]`` and leave the
padded tail untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LowRes, Observed, PeakTotal

DEFAULT_TOL = 1e-6


def _as_float(x) -> np.ndarray:
    return np.array(x, dtype=np.float64, copy=True)


def _valid(x: np.ndarray, valid_len: int | None) -> int:
    V = x.shape[-1] if valid_len is None else int(valid_len)
    if not 0 <= V <= x.shape[-1]:
        raise ValueError(f"valid_len={V} outside [0, {x.shape[-1]}]")
    return V


# ---------------------------------------------------------------------------
# peak / min / average


def f_peak_total(x, valid_len: int | None = None) -> np.ndarray:
    """Signed ``[max, min, mean]`` over the valid steps (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    V = _valid(x, valid_len)
    if V < 2:
        raise ValueError("peak/total constraint needs valid_len >= 2")
    v = x[..., :V]
    return np.stack([v.max(axis=-1), v.min(axis=-1), v.mean(axis=-1)], axis=-1)


def _peak_total_gap(v: np.ndarray, targets) -> float:
    y_max, y_min, y_avg = targets
    return max(abs(v.max() - y_max), abs(v.min() - y_min), abs(v.mean() - y_avg))


def _shift_to_sum(w: np.ndarray, lo: float, hi: float, target: float) -> np.ndarray:
    """``clip(w + c, lo, hi)`` with ``c`` chosen so the sum hits ``target`` (bisection on c)."""
    a, b = lo - w.max(), hi - w.min()
    for _ in range(200):
        c = 0.5 * (a + b)
        if np.clip(w + c, lo, hi).sum() < target:
            a = c
        else:
            b = c
        if b - a <= 1e-15 * max(1.0, abs(c)):
            break
    return np.clip(w + 0.5 * (a + b), lo, hi)


def project_peak_total(x, targets, valid_len: int | None = None, tolerance: float = DEFAULT_TOL, max_rounds: int = 8) -> np.ndarray:
    """Move ``x`` into ``{max = y_max, min = y_min, mean = y_avg}``.

    Clamp to ``[y_min, y_max]``, pin the earliest arg-max / arg-min to the
    targets, then shift the remaining entries uniformly to fix the mean,
    re-clamping and spreading clipped mass over still-movable entries for up
    to ``max_rounds`` rounds. An exact clipped-shift solve finishes the job if
    the rounds did not converge. Feasible inputs are returned unchanged.
    """
    if isinstance(targets, PeakTotal):
        targets = (targets.max, targets.min, targets.avg)
    y_max, y_min, y_avg = (float(v) for v in targets)
    x = _as_float(x)
    if x.ndim > 1:
        return np.stack([project_peak_total(r, targets, valid_len, tolerance, max_rounds) for r in x])
    V = _valid(x, valid_len)
    if V < 2:
        raise ValueError("peak/total projection needs valid_len >= 2")
    if not y_min <= y_avg <= y_max:
        raise ValueError(f"infeasible targets: need min <= avg <= max, got {y_min}, {y_avg}, {y_max}")
    v = x[:V]
    if _peak_total_gap(v, (y_max, y_min, y_avg)) <= tolerance:
        return x

    rest_sum = V * y_avg - y_max - y_min
    n_rest = V - 2
    if n_rest == 0:
        if abs(rest_sum) > tolerance * V:
            raise ValueError("with two valid steps the mean must equal (max + min) / 2")
    elif not y_min * n_rest - 1e-12 <= rest_sum <= y_max * n_rest + 1e-12:
        raise ValueError("no profile with these max/min/avg targets exists")

    i_max = int(np.argmax(v))
    i_min = int(np.argmin(v))
    if i_min == i_max:
        i_min = 1 if i_max == 0 else 0
    w = np.clip(v, y_min, y_max)
    w[i_max], w[i_min] = y_max, y_min
    rest = np.ones(V, dtype=bool)
    rest[[i_max, i_min]] = False

    if n_rest:
        r = w[rest]
        for _ in range(max_rounds):
            gap = rest_sum - r.sum()
            if abs(gap) <= 0.1 * tolerance * V:
                break
            movable = r < y_max if gap > 0 else r > y_min
            n = int(movable.sum())
            if n == 0:
                break
            r[movable] = np.clip(r[movable] + gap / n, y_min, y_max)
        w[rest] = r
        if _peak_total_gap(w, (y_max, y_min, y_avg)) > tolerance:
            w[rest] = _shift_to_sum(r, y_min, y_max, rest_sum)
    x[:V] = w
    return x


# ---------------------------------------------------------------------------
# imputation


def project_observed(x, indices, values, valid_len: int | None = None) -> np.ndarray:
    """Euclidean projection onto ``{x : x[indices] = values}``."""
    x = _as_float(x)
    V = _valid(x, valid_len)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if idx.size != vals.size:
        raise ValueError("indices and values differ in length")
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise ValueError(f"observed index out of range [0, {V})")
    if np.unique(idx).size != idx.size:
        raise ValueError("duplicate observed indices")
    x[..., idx] = vals
    return x


# ---------------------------------------------------------------------------
# super-resolution


def downsample(x, block_len: int, valid_len: int | None = None) -> np.ndarray:
    """Block means over non-overlapping windows of ``block_len`` valid steps."""
    x = np.asarray(x, dtype=np.float64)
    V = _valid(x, valid_len)
    if block_len < 1 or V % block_len:
        raise ValueError(f"valid_len={V} not divisible by block_len={block_len}")
    return x[..., :V].reshape(*x.shape[:-1], V // block_len, block_len).mean(axis=-1)


def project_block_average(x, y, block_len: int, valid_len: int | None = None) -> np.ndarray:
    """Euclidean projection onto ``{x : D x = y}``: each window is shifted to its target mean."""
    x = _as_float(x)
    V = _valid(x, valid_len)
    y = np.asarray(y, dtype=np.float64)
    if block_len < 1 or y.shape[-1] * block_len != V:
        raise ValueError(f"{y.shape[-1]} blocks of {block_len} steps do not cover valid_len={V}")
    shift = y - downsample(x, block_len, V)
    x[..., :V] += np.repeat(shift, block_len, axis=-1)
    return x


# ---------------------------------------------------------------------------
# operator objects used by the sampler


@dataclass(frozen=True)
class ProjectionOp:
    """Base class: ``project`` lands in the constraint set, ``residual`` measures ``f(x) - y``."""

    valid_len: int
    tolerance: float = DEFAULT_TOL

    kind = "none"

    def f(self, x) -> np.ndarray:
        raise NotImplementedError

    @property
    def target(self) -> np.ndarray:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        raise NotImplementedError

    def residual(self, x, ord=np.inf) -> float:
        return float(np.linalg.norm(self.f(x) - self.target, ord=ord))

    def feasible(self, x) -> bool:
        return self.residual(x) <= self.tolerance

    def __call__(self, x) -> np.ndarray:
        return self.project(x)


@dataclass(frozen=True)
class PeakTotalProjection(ProjectionOp):
    targets: PeakTotal = PeakTotal(0.0, 0.0, 0.0)
    kind = "peak_total"

    def f(self, x):
        return f_peak_total(x, self.valid_len)

    @property
    def target(self):
        return np.array([self.targets.max, self.targets.min, self.targets.avg])

    def project(self, x):
        return project_peak_total(x, self.targets, self.valid_len, self.tolerance)


@dataclass(frozen=True)
class ImputeProjection(ProjectionOp):
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind = "impute"

    def f(self, x):
        return np.asarray(x, dtype=np.float64)[..., self.indices]

    @property
    def target(self):
        return np.asarray(self.values, dtype=np.float64)

    def project(self, x):
        return project_observed(x, self.indices, self.values, self.valid_len)


@dataclass(frozen=True)
class SuperResProjection(ProjectionOp):
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    block_len: int = 1
    kind = "superres"

    def f(self, x):
        return downsample(x, self.block_len, self.valid_len)

    @property
    def target(self):
        return np.asarray(self.values, dtype=np.float64)

    def project(self, x):
        return project_block_average(x, self.values, self.block_len, self.valid_len)


def projector_for(condition, valid_len: int, tolerance: float = DEFAULT_TOL) -> ProjectionOp:
    """Build the operator matching a numeric condition record."""
    if isinstance(condition, PeakTotal):
        return PeakTotalProjection(valid_len, tolerance, targets=condition)
    if isinstance(condition, Observed):
        idx = np.asarray(condition.indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= valid_len):
            raise ValueError(f"observed index out of range [0, {valid_len})")
        return ImputeProjection(valid_len, tolerance, indices=idx, values=np.asarray(condition.values, dtype=float))
    if isinstance(condition, LowRes):
        if len(condition.values) * condition.block_len != valid_len:
            raise ValueError("low-resolution values do not cover the valid length")
        return SuperResProjection(valid_len, tolerance, values=np.asarray(condition.values, dtype=float), block_len=condition.block_len)
    raise TypeError(f"no projector for {type(condition).__name__}")


def projector_from_payload(kind: str, payload: dict, valid_len: int, tolerance: float = DEFAULT_TOL) -> ProjectionOp:
    """Parse the JSON guidance payloads ``peak_total``, ``impute`` and ``superres``."""
    try:
        if kind == "peak_total":
            cond = PeakTotal(float(payload["max"]), float(payload["min"]), float(payload["avg"]))
        elif kind == "impute":
            cond = Observed(tuple(int(i) for i in payload["indices"]), tuple(float(v) for v in payload["values"]))
        elif kind == "superres":
            cond = LowRes(tuple(float(v) for v in payload["values"]), int(payload["block_len"]))
        else:
            raise ValueError(f"unknown guidance kind {kind!r}")
    except KeyError as e:
        raise ValueError(f"{kind} payload is missing {e.args[0]!r}") from None
    return projector_for(cond, valid_len, tolerance)


# ---------------------------------------------------------------------------
# missing blocks


def make_missing_mask(valid_len: int, rate: float, min_block: int, max_block: int, seed: int, *, slack: float = 0.02, max_attempts: int = 200) -> np.ndarray:
    """Boolean mask (True = missing) made of disjoint consecutive blocks.

    Block lengths are uniform in ``[min_block, max_block]`` (the last block is
    shortened to stay under the upper rate bound when possible) and blocks are
    placed uniformly among positions that keep a gap to existing blocks, until
    the missing fraction lies in ``[rate - slack, rate + slack]``.
    """
    if not 0 < rate < 1:
        raise ValueError("rate must lie in (0, 1)")
    if not 1 <= min_block <= max_block <= valid_len:
        raise ValueError("need 1 <= min_block <= max_block <= valid_len")
    lo = int(np.ceil((rate - slack) * valid_len))
    hi = int(np.floor((rate + slack) * valid_len))
    lo = max(lo, 1)
    if hi < min_block or hi < lo:
        raise ValueError(f"rate {rate} cannot be reached with blocks of {min_block}..{max_block} steps")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        mask = np.zeros(valid_len, dtype=bool)
        missing = 0
        while missing < lo:
            room = hi - missing
            if room < min_block:
                break
            length = min(int(rng.integers(min_block, max_block + 1)), room)
            # keep one observed step between blocks so they stay distinct
            blocked = np.convolve(mask, np.ones(3, dtype=int), mode="same") > 0
            free = np.concatenate([[0], np.cumsum(~blocked)])
            starts = np.flatnonzero(free[length:] - free[:-length] == length) if length <= valid_len else []
            if len(starts) == 0:
                break
            s = int(rng.choice(starts))
            mask[s : s + length] = True
            missing += length
        if lo <= missing <= hi:
            return mask
    raise ValueError(f"could not place blocks reaching rate {rate} after {max_attempts} attempts")
