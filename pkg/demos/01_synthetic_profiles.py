"""Synthetic smart-meter months: padding, normalization and numeric conditions.

Run:  python demos/01_synthetic_profiles.py
"""

import tempfile
from pathlib import Path

import numpy as np

from meterflow.data import (
    ConditionEncoder,
    SynthConfig,
    autocorrelation,
    derive_numeric_conditions,
    normalize,
    pad_to_month,
    read_profiles_csv,
    synth_dataset,
    write_profiles_csv,
)

# Full months at hourly resolution keep the printout small.
cfg = SynthConfig(steps_per_day=24, months=(2, 7), years=(2023, 2024))
ds = synth_dataset(seed=0, n_customers=6, cfg=cfg)
print(f"{len(ds)} profiles from {len(ds.customer_ids)} customers, padded length {cfg.padded_len}")
for split in ("train", "val", "test"):
    print(f"  {split:5s} customers: {list(ds.splits[split])}")

# Every month is zero-padded to 31 days; valid_len marks where real data ends.
for p in ds.profiles[:4]:
    pt = derive_numeric_conditions(p)
    print(f"  customer {p.customer_id} {p.category:3s} {p.year}-{p.month:02d}: {p.n_days} days, "
          f"first weekday {p.first_weekday}, max {pt.max:+.3f} min {pt.min:+.3f} avg {pt.avg:+.3f}")

# PV customers export at midday, so their minimum goes negative.
pv = next(p for p in ds.profiles if p.category == "PV" and p.month == 7)
print(f"PV July minimum {pv.valid.min():+.3f} (generation equipment flag = {pv.generation_equipment})")

# Daily periodicity shows up as a strong lag-24 autocorrelation.
e3a = next(p for p in ds.profiles if p.category == "E3A")
print(f"lag-24 autocorrelation {autocorrelation(e3a.valid, 24):.2f}, lag-7 {autocorrelation(e3a.valid, 7):.2f}")

# Raw kW readings are divided by connection capacity and padded by hand.
raw = 40 + 25 * np.sin(np.linspace(0, 28 * 2 * np.pi, 28 * 24))
p = pad_to_month(normalize(raw, capacity=80.0), steps_per_day=24, month=2, year=2023, first_weekday=2)
print(f"hand-built February: valid_len {p.valid_len} of {p.padded_len}, tail all zero: {not p.values[p.valid_len:].any()}")

# The encoder turns profiles into the six categorical condition indices.
enc = ConditionEncoder(cfg.categories, cfg.years)
print("condition vocab sizes", enc.vocab_sizes)
print("encoded", enc.encode(p, check_calendar=True))

# CSV round trip is exact to the printed precision.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "profiles.csv"
    write_profiles_csv(path, ds.profiles)
    back = read_profiles_csv(path, ds.capacity_map)
    worst = max(np.abs(a.values - b.values).max() for a, b in zip(ds.profiles, back))
    print(f"CSV round trip: {len(back)} rows, max abs difference {worst:.1e}")
