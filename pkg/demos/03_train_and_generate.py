"""Train a small velocity network and check its samples with an MMD test.

Uses week-long hourly profiles so a few minutes on one CPU core is enough.
The checkpoint is written to demos/_out/toy.ckpt for the next demo.

Run:  python demos/03_train_and_generate.py [n_iters]
"""

import logging
import sys
import time
from pathlib import Path

import numpy as np

from meterflow.checkpoint import read_checkpoint, save_state
from meterflow.data import ConditionEncoder, SynthConfig, synth_dataset
from meterflow.flow import FlowSchedule, TrainConfig, TrainingData, sample, smoothed_losses, train
from meterflow.metrics import crps, permutation_test
from meterflow.nn import NetConfig

OUT = Path(__file__).parent / "_out"
SYNTH = SynthConfig(period="week", steps_per_day=24, months=tuple(range(1, 13)), years=(2022,))

logging.basicConfig(level=logging.INFO, format="%(message)s")
n_iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000

ds = synth_dataset(0, 60, SYNTH)
enc = ConditionEncoder(SYNTH.categories, SYNTH.years)
train_data = TrainingData.from_dataset(ds.subset("train"), enc)
print(f"{len(train_data)} training weeks of {SYNTH.padded_len} steps")

net_cfg = NetConfig(n_layers=2, model_dim=32, ff_dim=64, n_heads=4, patch_len=4, conv_kernel=5,
                    steps_per_day=SYNTH.steps_per_day, cond_vocab_sizes=enc.vocab_sizes)
cfg = TrainConfig(batch_size=16, learning_rate=1e-3, n_iters=n_iters, log_every=500)
t0 = time.perf_counter()
state = train(train_data, net_cfg, cfg)
loss = smoothed_losses(state.history, 200)
print(f"trained {n_iters} iterations in {time.perf_counter() - t0:.0f}s; smoothed loss {loss[0]:.3f} -> {loss[-1]:.3f}")

OUT.mkdir(exist_ok=True)
ckpt = save_state(OUT / "toy.ckpt", state, {"encoder": enc.to_dict(), "padded_len": SYNTH.padded_len,
                                            "steps_per_day": SYNTH.steps_per_day})
print(f"checkpoint {OUT / 'toy.ckpt'} (EMA checksum {ckpt.checksum()[:12]})")

# Sampling uses the EMA weights.
net = read_checkpoint(OUT / "toy.ckpt").load_net("ema")
test = ds.subset("test")
held = list(test.profiles[:100])
X = np.stack([p.values for p in held])
gen = sample(net, enc.encode_many(held), SYNTH.padded_len, SYNTH.padded_len, len(held),
             schedule=FlowSchedule(n_steps=100), seed=1).samples

# A few thousand iterations leave a visible gap (small p-value); the
# acceptance run trains a larger model for 20k iterations.
res = permutation_test(X, gen, 500, seed=0)
print(f"MMD {res.mmd:.4f}, permutation p-value {res.p_value:.3f} (bandwidth {res.bandwidth:.2f})")

# Compare against a deliberately wrong generator: the same samples shifted up.
shifted = permutation_test(X, gen + 0.1, 500, seed=0)
print(f"shifted by +0.1: MMD {shifted.mmd:.4f}, p-value {shifted.p_value:.3f}")

# Per-profile statistics of real and generated weeks.
for name, Z in (("real", X), ("generated", gen)):
    print(f"  {name:9s} mean {Z.mean():+.3f}  std {Z.std():.3f}  weekly peak {Z.max(axis=1).mean():+.3f}")

# An ensemble drawn for one condition, scored against the real week with CRPS.
target = held[0]
members = sample(net, enc.encode_many([target] * 16), SYNTH.padded_len, SYNTH.padded_len, 16,
                 schedule=FlowSchedule(n_steps=100), seed=2).samples
print(f"16-member ensemble CRPS {crps(members, target.values):.4f}; mean-member MAE "
      f"{np.abs(members.mean(axis=0) - target.values).mean():.4f}")
