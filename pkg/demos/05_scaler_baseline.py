"""The algebraic scaler: hit a target peak and total with no learning at all.

The mean profile of a (category, month) is min-max normalized to a shape s in
[0, 1] and raised to a power a chosen so that y_max * s**a sums to y_sum.
When no such power exists the scaler falls back to scaling the mean profile.

Run:  python demos/05_scaler_baseline.py
"""

import math

import numpy as np

from meterflow.baselines import ScalerModel, scaler_fit, scaler_generate, solve_exponent
from meterflow.data import SynthConfig, synth_dataset

cfg = SynthConfig(steps_per_day=24, months=(1, 7), years=(2022,))
ds = synth_dataset(0, 40, cfg)
model = scaler_fit(ds.subset("train"))
print("fitted shapes:", sorted(model.means))

p = next(q for q in ds.subset("test").profiles if q.category == "E3A")
y_max, y_sum = float(p.valid.max()), math.fsum(p.valid)
res = scaler_generate(model, p.category, p.month, y_max, y_sum)
print(f"target max {y_max:.6f} sum {y_sum:.6f}")
print(f"scaled max {res.profile.max():.6f} sum {math.fsum(res.profile):.6f}  (exponent a = {res.exponent:.4f})")
print(f"MAE to the real month {np.abs(res.profile - p.valid[: res.profile.size]).mean():.4f}")

# The ratio y_sum / y_max must lie between sum(s**a) at the bracket ends.
shape = model.shape(p.category, p.month)
for ratio in (0.5, shape.sum() * 0.5, shape.sum(), shape.size - 0.5, shape.size + 1.0):
    a = solve_exponent(shape, ratio)
    print(f"  ratio {ratio:8.2f} -> exponent {'no root' if a is None else f'{a:.4f}'}")

# A total larger than peak * length cannot be met with that peak: fallback.
res = scaler_generate(model, p.category, p.month, y_max, y_max * shape.size * 1.2)
print(f"infeasible target: peak constrained = {res.peak_constrained}, "
      f"sum {math.fsum(res.profile):.4f} (target {y_max * shape.size * 1.2:.4f}), peak {res.profile.max():.4f}")

# The fitted model round-trips through JSON.
again = ScalerModel.from_json(model.to_json())
print("JSON round trip identical:", all(np.array_equal(again.means[k], v) for k, v in model.means.items()))
