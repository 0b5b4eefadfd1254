"""Profile containers, condition encoding, padding, I/O and a synthetic load generator."""

from __future__ import annotations

import calendar
import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CONDITION_FIELDS = (
    "year",
    "month",
    "month_length",
    "first_weekday",
    "category",
    "generation_equipment",
)

SPLIT_RATIOS = (0.70, 0.15, 0.15)
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class Profile:
    """One normalized load profile, zero-padded to ``padded_len`` steps.

    ``values[valid_len:]`` is always exactly zero.
    """

    values: np.ndarray
    valid_len: int
    steps_per_day: int
    first_weekday: int
    category: str
    year: int
    month: int
    customer_id: int = 0
    capacity: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("profile values must be one-dimensional")
        if not 1 <= self.valid_len <= values.size:
            raise ValueError(f"valid_len={self.valid_len} outside [1, {values.size}]")
        if not 0 <= self.first_weekday <= 6:
            raise ValueError(f"first_weekday must be in 0..6, got {self.first_weekday}")
        if not 1 <= self.month <= 12:
            raise ValueError(f"month must be in 1..12, got {self.month}")
        if np.any(values[self.valid_len:] != 0.0):
            raise ValueError("padded tail must be zero")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def padded_len(self) -> int:
        return self.values.size

    @property
    def valid(self) -> np.ndarray:
        return self.values[: self.valid_len]

    @property
    def n_days(self) -> int:
        return self.valid_len // self.steps_per_day

    @property
    def generation_equipment(self) -> int:
        return int(self.category == "PV")


@dataclass(frozen=True)
class PeakTotal:
    max: float
    min: float
    avg: float

    def __post_init__(self):
        if not self.min <= self.avg <= self.max:
            raise ValueError(f"need min <= avg <= max, got {self.min}, {self.avg}, {self.max}")


@dataclass(frozen=True)
class Observed:
    indices: tuple[int, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")


@dataclass(frozen=True)
class LowRes:
    values: tuple[float, ...]
    block_len: int


@dataclass(frozen=True)
class ConditionSet:
    """Categorical codes fed to the network plus at most one numeric constraint."""

    categorical: Mapping[str, int]
    numerical: PeakTotal | Observed | LowRes | None = None

    def __post_init__(self):
        missing = set(CONDITION_FIELDS) - set(self.categorical)
        if missing:
            raise ValueError(f"missing categorical conditions: {sorted(missing)}")


@dataclass(frozen=True)
class ConditionEncoder:
    """Maps profile metadata onto small-integer codes for the embedding tables."""

    categories: tuple[str, ...]
    years: tuple[int, ...]

    @property
    def vocab_sizes(self) -> list[int]:
        # month_length is coded as n_days - 1, so weekly and monthly profiles share a table
        return [len(self.years), 12, 31, 7, len(self.categories), 2]

    def encode(self, p: Profile, *, check_calendar: bool = False) -> dict[str, int]:
        if p.category not in self.categories:
            raise ValueError(f"unknown category {p.category!r}")
        if p.year not in self.years:
            raise ValueError(f"year {p.year} not in encoder years {self.years}")
        if check_calendar and p.n_days >= 28:
            first, days = calendar.monthrange(p.year, p.month)
            if (first, days) != (p.first_weekday, p.n_days):
                raise ValueError(
                    f"{p.year}-{p.month:02d} starts on weekday {first} with {days} days, "
                    f"profile says {p.first_weekday} and {p.n_days}"
                )
        return {
            "year": self.years.index(p.year),
            "month": p.month - 1,
            "month_length": p.n_days - 1,
            "first_weekday": p.first_weekday,
            "category": self.categories.index(p.category),
            "generation_equipment": p.generation_equipment,
        }

    def encode_many(self, profiles: Sequence[Profile]) -> dict[str, np.ndarray]:
        rows = [self.encode(p) for p in profiles]
        return {k: np.array([r[k] for r in rows], dtype=np.int64) for k in CONDITION_FIELDS}

    def to_dict(self) -> dict:
        return {"categories": list(self.categories), "years": list(self.years)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConditionEncoder":
        return cls(tuple(d["categories"]), tuple(int(y) for y in d["years"]))


@dataclass(frozen=True, eq=False)
class Dataset:
    profiles: tuple[Profile, ...]
    split: str = "all"
    split_seed: int = 0
    splits: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.profiles)

    @property
    def customer_ids(self) -> list[int]:
        return sorted({p.customer_id for p in self.profiles})

    @property
    def capacity_map(self) -> dict[int, float]:
        return {p.customer_id: p.capacity for p in self.profiles}

    def subset(self, split: str) -> "Dataset":
        if split not in self.splits:
            raise KeyError(f"no split named {split!r}")
        ids = set(self.splits[split])
        profiles = tuple(p for p in self.profiles if p.customer_id in ids)
        return replace(self, profiles=profiles, split=split)

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """Values as a ``(n, padded_len)`` array and the valid lengths."""
        lengths = {p.padded_len for p in self.profiles}
        if len(lengths) != 1:
            raise ValueError(f"profiles have mixed padded lengths {sorted(lengths)}")
        x = np.stack([p.values for p in self.profiles])
        v = np.array([p.valid_len for p in self.profiles], dtype=np.int64)
        return x, v


# ---------------------------------------------------------------------------
# basic transforms


def normalize(raw, capacity: float, *, clamp: bool = False) -> np.ndarray:
    """Divide raw kW readings by the connection capacity."""
    if not capacity > 0:
        raise ValueError(f"capacity must be positive, got {capacity}")
    raw = np.asarray(raw, dtype=np.float64)
    over = np.abs(raw) > capacity
    if np.any(over):
        if not clamp:
            raise ValueError(
                f"{int(over.sum())} readings exceed capacity {capacity} (max |raw|={np.abs(raw).max()})"
            )
        raw = np.clip(raw, -capacity, capacity)
    return raw / capacity


def denormalize(values, capacity: float) -> np.ndarray:
    if not capacity > 0:
        raise ValueError(f"capacity must be positive, got {capacity}")
    return np.asarray(values, dtype=np.float64) * capacity


def pad_to_month(values, steps_per_day: int, **meta) -> Profile:
    """Zero-pad a 28..31 day series to 31 days; ``meta`` goes to :class:`Profile`."""
    values = np.asarray(values, dtype=np.float64)
    days, rem = divmod(values.size, steps_per_day)
    if rem or not 28 <= days <= 31:
        raise ValueError(
            f"{values.size} steps is not a whole number of days in [28, 31] at {steps_per_day} steps/day"
        )
    padded = np.zeros(31 * steps_per_day)
    padded[: values.size] = values
    meta.setdefault("first_weekday", 0)
    meta.setdefault("category", "E3A")
    meta.setdefault("year", 2022)
    meta.setdefault("month", 1)
    return Profile(padded, valid_len=values.size, steps_per_day=steps_per_day, **meta)


def derive_numeric_conditions(p: Profile | np.ndarray, valid_len: int | None = None) -> PeakTotal:
    """Signed max, min and mean over the valid steps."""
    if isinstance(p, Profile):
        x = p.valid
    else:
        x = np.asarray(p, dtype=np.float64)
        x = x[:valid_len] if valid_len is not None else x
    if x.size == 0:
        raise ValueError("empty profile")
    return PeakTotal(max=float(x.max()), min=float(x.min()), avg=float(x.mean()))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class CategoryPreset:
    base: tuple[float, float]          # fraction of capacity
    daily_amp: tuple[float, float]     # amplitude of the first harmonic
    peak_hour: float                   # hour of the first-harmonic maximum
    weekend: tuple[float, float]       # multiplier on the daily swing at weekends
    pv: tuple[float, float] = (0.0, 0.0)


CATEGORY_PRESETS = {
    "E3A": CategoryPreset(base=(0.25, 0.40), daily_amp=(0.10, 0.22), peak_hour=13.0, weekend=(0.3, 0.6)),
    "E3B": CategoryPreset(base=(0.30, 0.50), daily_amp=(0.05, 0.15), peak_hour=11.0, weekend=(0.7, 1.0)),
    "E3C": CategoryPreset(base=(0.15, 0.30), daily_amp=(0.12, 0.25), peak_hour=18.0, weekend=(0.8, 1.2)),
    "PV": CategoryPreset(base=(0.12, 0.25), daily_amp=(0.04, 0.10), peak_hour=12.0, weekend=(0.5, 0.9), pv=(0.65, 0.95)),
}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator. ``period='week'`` cuts 7-day profiles."""

    categories: tuple[str, ...] = ("E3A", "PV")
    years: tuple[int, ...] = (2022, 2023)
    months: tuple[int, ...] = (1, 7)
    period: str = "month"
    weeks_per_month: int = 4
    steps_per_day: int = 96
    n_harmonics: int = 3
    noise_scale: float = 0.05
    peak_rate: float = 0.3
    peak_height: float = 0.3
    peak_max_len: int = 4
    capacity_range: tuple[float, float] = (60.0, 160.0)
    split_seed: int = 0

    def __post_init__(self):
        unknown = [c for c in self.categories if c not in CATEGORY_PRESETS]
        if unknown:
            raise ValueError(f"unknown categories {unknown}; known: {sorted(CATEGORY_PRESETS)}")
        if self.period not in ("month", "week"):
            raise ValueError(f"period must be 'month' or 'week', got {self.period!r}")
        if not 1 <= self.n_harmonics <= 3:
            raise ValueError("n_harmonics must be in 1..3")
        if self.period == "week" and not 1 <= self.weeks_per_month <= 4:
            raise ValueError("weeks_per_month must be in 1..4")

    @property
    def padded_len(self) -> int:
        return (7 if self.period == "week" else 31) * self.steps_per_day


def _customer_params(rng: np.random.Generator, category: str, cfg: SynthConfig) -> dict:
    pre = CATEGORY_PRESETS[category]
    amps = [rng.uniform(*pre.daily_amp)]
    phases = [2 * np.pi * (pre.peak_hour + rng.normal(0, 1.0)) / 24]
    for k in range(2, cfg.n_harmonics + 1):
        amps.append(rng.uniform(0, amps[0] / k))
        phases.append(rng.uniform(0, 2 * np.pi))
    return {
        "base": rng.uniform(*pre.base),
        "amps": np.array(amps),
        "phases": np.array(phases),
        "weekend": rng.uniform(*pre.weekend),
        "pv": rng.uniform(*pre.pv) if pre.pv[1] > 0 else 0.0,
        "capacity": rng.uniform(*cfg.capacity_range),
    }


def _synth_values(
    rng: np.random.Generator, params: dict, cfg: SynthConfig, month: int, first_weekday: int, n_days: int
) -> np.ndarray:
    spd = cfg.steps_per_day
    hours = np.arange(n_days * spd) / spd * 24 % 24
    day_idx = np.repeat(np.arange(n_days), spd)
    weekday = (first_weekday + day_idx) % 7

    swing = np.zeros_like(hours)
    for k, (a, ph) in enumerate(zip(params["amps"], params["phases"]), start=1):
        swing += a * np.cos(2 * np.pi * k * hours / 24 - k * ph)
    swing = np.where(weekday >= 5, params["weekend"] * swing, swing)
    season = 1.0 + 0.15 * np.cos(2 * np.pi * (month - 1) / 12)
    load = season * np.maximum(params["base"] + swing, 0.0)

    if cfg.noise_scale > 0:
        load = load * np.exp(cfg.noise_scale * rng.standard_normal(load.size))
    if cfg.peak_rate > 0:
        for _ in range(rng.poisson(cfg.peak_rate * n_days)):
            start = rng.integers(0, load.size)
            length = rng.integers(1, cfg.peak_max_len + 1)
            load[start : start + length] += cfg.peak_height * rng.uniform(0.5, 1.0)

    if params["pv"] > 0:
        sun = np.clip(np.sin(np.pi * (hours - 6) / 12), 0, None) ** 1.5
        summer = 0.55 + 0.45 * np.sin(np.pi * (month - 0.5) / 12) ** 2
        clear = rng.uniform(0.6, 1.0, n_days) if cfg.noise_scale > 0 else np.ones(n_days)
        load = load - params["pv"] * summer * clear[day_idx] * sun
    return np.clip(load, -1.0, 1.0)


def split_customers(customer_ids: Iterable[int], split_seed: int) -> dict[str, tuple[int, ...]]:
    """70/15/15 split of customer ids; deterministic per seed."""
    ids = np.array(sorted(set(customer_ids)))
    perm = np.random.default_rng(split_seed).permutation(ids)
    n_train = int(round(SPLIT_RATIOS[0] * ids.size))
    n_val = int(round(SPLIT_RATIOS[1] * ids.size))
    return {
        "train": tuple(sorted(int(i) for i in perm[:n_train])),
        "val": tuple(sorted(int(i) for i in perm[n_train : n_train + n_val])),
        "test": tuple(sorted(int(i) for i in perm[n_train + n_val :])),
    }


def synth_customer(seed: int, customer_id: int, category: str, cfg: SynthConfig) -> list[Profile]:
    """All profiles of one synthetic customer; depends only on (seed, customer_id)."""
    rng = np.random.default_rng([seed, customer_id])
    params = _customer_params(rng, category, cfg)
    spd = cfg.steps_per_day
    out = []
    for year in cfg.years:
        for month in cfg.months:
            first, days = calendar.monthrange(year, month)
            if cfg.period == "month":
                starts = [(first, days)]
            else:
                starts = [((first + 7 * w) % 7, 7) for w in range(cfg.weeks_per_month)]
            for weekday, n_days in starts:
                v = _synth_values(rng, params, cfg, month, weekday, n_days)
                padded = np.zeros(cfg.padded_len)
                padded[: v.size] = v
                out.append(
                    Profile(
                        padded,
                        valid_len=v.size,
                        steps_per_day=spd,
                        first_weekday=weekday,
                        category=category,
                        year=year,
                        month=month,
                        customer_id=customer_id,
                        capacity=params["capacity"],
                    )
                )
    return out


def synth_dataset(seed: int, n_customers: int, cfg: SynthConfig | None = None) -> Dataset:
    """Deterministic synthetic dataset; customers cycle through ``cfg.categories``."""
    cfg = cfg or SynthConfig()
    if n_customers < 1:
        raise ValueError("n_customers must be >= 1")
    profiles = []
    for cid in range(n_customers):
        category = cfg.categories[cid % len(cfg.categories)]
        profiles.extend(synth_customer(seed, cid, category, cfg))
    return Dataset(
        tuple(profiles),
        split="all",
        split_seed=cfg.split_seed,
        splits=split_customers(range(n_customers), cfg.split_seed),
    )


# ---------------------------------------------------------------------------
# file formats

CSV_META = ("customer_id", "category", "year", "month", "first_weekday", "steps_per_day", "valid_len")


def write_profiles_csv(path, profiles: Iterable[Profile]) -> None:
    profiles = list(profiles)
    width = max((p.padded_len for p in profiles), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(CSV_META) + [f"v{i}" for i in range(width)])
        for p in profiles:
            meta = [p.customer_id, p.category, p.year, p.month, p.first_weekday, p.steps_per_day, p.valid_len]
            w.writerow(meta + [format(float(v), ".17g") for v in p.values])


def read_profiles_csv(path, capacity_map: Mapping[int, float] | None = None) -> list[Profile]:
    capacity_map = capacity_map or {}
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header[: len(CSV_META)]) != CSV_META:
            raise ValueError(f"unexpected profile CSV header {header[:len(CSV_META)]}")
        for row in r:
            cid = int(row[0])
            values = np.array([float(v) for v in row[len(CSV_META) :] if v != ""])
            out.append(
                Profile(
                    values,
                    valid_len=int(row[6]),
                    steps_per_day=int(row[5]),
                    first_weekday=int(row[4]),
                    category=row[1],
                    year=int(row[2]),
                    month=int(row[3]),
                    customer_id=cid,
                    capacity=float(capacity_map.get(cid, 1.0)),
                )
            )
    return out


def write_manifest(path, ds: Dataset, **extra) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "capacity_map": {str(k): v for k, v in sorted(ds.capacity_map.items())},
        "split_seed": ds.split_seed,
        "splits": {k: list(v) for k, v in ds.splits.items()},
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_dataset(csv_path, manifest_path) -> Dataset:
    doc = json.loads(Path(manifest_path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported manifest format_version {doc.get('format_version')}")
    caps = {int(k): float(v) for k, v in doc["capacity_map"].items()}
    profiles = read_profiles_csv(csv_path, caps)
    splits = {k: tuple(int(i) for i in v) for k, v in doc["splits"].items()}
    return Dataset(tuple(profiles), split="all", split_seed=int(doc["split_seed"]), splits=splits)


def autocorrelation(x: np.ndarray, lag: int) -> float:
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    denom = float(np.dot(x, x))
    if denom == 0 or lag >= x.size:
        return math.nan
    return float(np.dot(x[:-lag], x[lag:]) / denom) if lag else 1.0
