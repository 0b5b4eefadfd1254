"""Acceptance criteria, one test per criterion, each at its stated tolerance.

Every test appends a ``CRITERION n: PASS|FAIL ...`` line that the terminal
summary prints. The desk-scale model (criteria 4, 5, 6, 7 and 12) is trained
once per session; set ``METERFLOW_REUSE_DESK=1`` to reuse a checkpoint cached
by an earlier run in the pytest cache directory.
"""

import json
import math
import os
import time
import zlib
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE_LINES, tiny_config
from oracles import block_matrix, central_difference, crps_integral, kkt_projection, selection_matrix

from meterflow.baselines import scaler_fit, scaler_generate, upsample
from meterflow.checkpoint import read_checkpoint, save_state
from meterflow.cli import main as cli_main
from meterflow.data import ConditionEncoder, SynthConfig, derive_numeric_conditions, synth_dataset, write_profiles_csv
from meterflow.flow import FlowSchedule, GuidanceSpec, TrainConfig, TrainingData, sample, train
from meterflow.metrics import crps, permutation_test
from meterflow.nn import NetConfig, VelocityNet
from meterflow.tasks import (
    ImputeProjection,
    PeakTotalProjection,
    SuperResProjection,
    downsample,
    make_missing_mask,
    project_block_average,
    project_observed,
    project_peak_total,
)

# desk-scale experiment
DESK_SYNTH = SynthConfig(period="week", weeks_per_month=4, months=tuple(range(1, 13)), years=(2022,))
DESK_CUSTOMERS = 200
DESK_TRAIN = TrainConfig(batch_size=8, learning_rate=1e-3, n_iters=20_000, log_every=1000, val_every=0, seed=0)
FIDELITY_STEPS = 100
FIDELITY_SEEDS = (0, 1, 2, 3)
SUPERRES_MEMBERS = 8
SUPERRES_STEPS = 100


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# shared desk model


class Desk:
    def __init__(self, ds, encoder, net, ckpt_path, train_seconds, cached):
        self.ds, self.encoder, self.net = ds, encoder, net
        self.test = ds.subset("test")
        self.ckpt_path, self.train_seconds, self.cached = ckpt_path, train_seconds, cached
        self.T = DESK_SYNTH.padded_len

    def cond(self, profiles):
        return self.encoder.encode_many(profiles)


@pytest.fixture(scope="session")
def desk(request):
    ds = synth_dataset(0, DESK_CUSTOMERS, DESK_SYNTH)
    encoder = ConditionEncoder(DESK_SYNTH.categories, DESK_SYNTH.years)
    net_cfg = NetConfig.desk(cond_vocab_sizes=tuple(encoder.vocab_sizes), steps_per_day=DESK_SYNTH.steps_per_day)
    cache = Path(request.config.cache.mkdir("meterflow-desk"))
    key = f"{zlib.crc32(repr((DESK_SYNTH, DESK_CUSTOMERS, DESK_TRAIN, net_cfg)).encode()):08x}"
    ckpt_path = cache / f"desk-{key}.ckpt"
    if os.environ.get("METERFLOW_REUSE_DESK") == "1" and ckpt_path.exists():
        ckpt = read_checkpoint(ckpt_path)
        return Desk(ds, encoder, ckpt.load_net("ema"), ckpt_path, ckpt.meta["train_seconds"], True)
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    data = TrainingData.from_dataset(ds.subset("train"), encoder)
    t0 = time.perf_counter()
    state = train(data, net_cfg, DESK_TRAIN)
    seconds = time.perf_counter() - t0
    meta = {"encoder": encoder.to_dict(), "padded_len": DESK_SYNTH.padded_len,
            "steps_per_day": DESK_SYNTH.steps_per_day, "train_seconds": seconds, "n_train_profiles": len(data)}
    ckpt = save_state(ckpt_path, state, meta)
    return Desk(ds, encoder, ckpt.load_net("ema"), ckpt_path, seconds, False)


# ---------------------------------------------------------------------------
# 1. gradients


def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    cfg = tiny_config(n_layers=1, model_dim=8, n_heads=2, ff_dim=16, patch_len=4, conv_kernel=3, precision="f64")
    net = VelocityNet(cfg)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in net.parameters():  # gates and the output layer start at zero; move off that point
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.normal(size=(2, 16)))
    G = torch.as_tensor(rng.normal(size=(2, 16)))
    t = torch.tensor([0.3, 0.8], dtype=torch.float64)
    cond = {"year": torch.tensor([0, 1]), "month": torch.tensor([3, 11]), "month_length": torch.tensor([30, 27]),
            "first_weekday": torch.tensor([2, 6]), "category": torch.tensor([1, 0]), "generation_equipment": torch.tensor([1, 0])}
    valid = torch.tensor([16, 12])

    net(x, t, cond, valid)
    analytic = net.backward(G)

    def loss():
        with torch.no_grad():
            return float((net(x, t, cond, valid) * G).sum())

    numeric = central_difference(loss, dict(net.named_parameters()))
    worst, worst_name = 0.0, ""
    for name, num in numeric.items():
        a = analytic[name].numpy()
        denom = max(np.linalg.norm(num), np.linalg.norm(a), 1e-12)
        err = np.linalg.norm(a - num) / denom
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    record(1, ok, f"max relative gradient error {worst:.2e} ({worst_name}) over {len(numeric)} tensors, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. masking


def test_criterion_02_mask_equivalence():
    t0 = time.perf_counter()
    cfg = NetConfig.desk(cond_vocab_sizes=(2, 12, 31, 7, 2, 2))
    net = VelocityNet(cfg, seed=1)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 0.05)
    rng = np.random.default_rng(2)
    worst = 0.0
    for days in (28, 29, 30):
        V = days * 96
        x = torch.as_tensor(rng.uniform(-1, 1, (1, 2976)), dtype=torch.float32)
        x[:, V:] = 0
        cond = {"year": torch.tensor([0]), "month": torch.tensor([1]), "month_length": torch.tensor([days - 1]),
                "first_weekday": torch.tensor([days % 7]), "category": torch.tensor([1]), "generation_equipment": torch.tensor([1])}
        with torch.no_grad():
            padded = net(x, 0.4, cond, torch.tensor([V]))
            trunc = net(x[:, :V], 0.4, cond)
        worst = max(worst, float((padded[:, :V] - trunc).abs().max()))
        assert float(trunc.abs().max()) > 1e-2  # the check is not vacuous
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 60
    record(2, ok, f"max |padded - truncated| = {worst:.2e} (f32) for 28/29/30-day months, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. straight paths


def test_criterion_03_straight_path():
    rng = np.random.default_rng(3)
    x1 = rng.uniform(-1, 1, (4, 672))
    x0 = rng.normal(size=(4, 672))
    oracle = lambda x, t, c, v: torch.as_tensor(x1 - x0)
    errs = {}
    for S in (1, 10, 500):
        res = sample(oracle, {}, 672, 672, 4, schedule=FlowSchedule(n_steps=S), x0=x0)
        errs[S] = float(np.max(np.abs(res.samples - x1)))
    ok = max(errs.values()) <= 1e-12
    record(3, ok, "max error " + ", ".join(f"S={S}: {e:.1e}" for S, e in errs.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. fidelity


def test_criterion_04_desk_fidelity(desk):
    t0 = time.perf_counter()
    pvals = []
    n_train = len(desk.ds.subset("train"))
    for seed in FIDELITY_SEEDS:
        rng = np.random.default_rng(1000 + seed)
        idx = rng.choice(len(desk.test), 200, replace=False)
        held = [desk.test.profiles[i] for i in idx]
        X = np.stack([p.values for p in held])
        res = sample(desk.net, desk.cond(held), np.array([p.valid_len for p in held]), desk.T, 200,
                     schedule=FlowSchedule(n_steps=FIDELITY_STEPS), seed=2000 + seed)
        pvals.append(permutation_test(X, res.samples, 1000, seed=seed).p_value)
    sample_seconds = time.perf_counter() - t0
    total = desk.train_seconds + sample_seconds
    passes = sum(p > 0.05 for p in pvals)
    ok = passes >= 3 and total <= 3600 and DESK_TRAIN.n_iters >= 20_000 and n_train >= 2000
    cached = " (training time from cached run)" if desk.cached else ""
    record(4, ok, f"p-values {[round(p, 3) for p in pvals]} ({passes}/4 > 0.05); {n_train} train profiles, "
                  f"{DESK_TRAIN.n_iters} iters, S={FIDELITY_STEPS}; train {desk.train_seconds/60:.1f} min + "
                  f"sampling {sample_seconds/60:.1f} min = {total/60:.1f} min on {os.cpu_count()} core(s){cached}")
    assert ok


# ---------------------------------------------------------------------------
# 5 / 6. constraints and guidance on the imputation task


@pytest.fixture(scope="session")
def impute_runs(desk):
    """100 imputation trials, guided and unguided from identical noise, S = 500."""
    rng = np.random.default_rng(6)
    idx = rng.choice(len(desk.test), 100, replace=False)
    targets = [desk.test.profiles[i] for i in idx]
    ops = []
    for k, p in enumerate(targets):
        missing = make_missing_mask(p.valid_len, 0.2, 5, 96, seed=k)
        obs = np.flatnonzero(~missing)
        ops.append(ImputeProjection(p.valid_len, indices=obs, values=p.values[obs]))
    common = dict(schedule=FlowSchedule(n_steps=500), seed=66)
    cond = desk.cond(targets)
    V = np.array([p.valid_len for p in targets])
    guided = sample(desk.net, cond, V, desk.T, 100, guidance=GuidanceSpec(ops), **common)
    plain = sample(desk.net, cond, V, desk.T, 100, guidance=GuidanceSpec(ops, enabled=False), **common)
    return ops, guided, plain


@pytest.fixture(scope="session")
def superres_runs(desk):
    rng = np.random.default_rng(7)
    idx = rng.choice(len(desk.test), 100, replace=False)
    targets = [desk.test.profiles[i] for i in idx]
    m = SUPERRES_MEMBERS
    ops = []
    for p in targets:
        y = downsample(p.values, 16, p.valid_len)
        ops += [SuperResProjection(p.valid_len, values=y, block_len=16)] * m
    cond = {k: np.repeat(v, m) for k, v in desk.cond(targets).items()}
    V = np.repeat([p.valid_len for p in targets], m)
    res = sample(desk.net, cond, V, desk.T, len(ops), guidance=GuidanceSpec(ops),
                 schedule=FlowSchedule(n_steps=SUPERRES_STEPS), seed=77)
    return targets, ops, res


def test_criterion_05_constraint_exactness(desk, impute_runs, superres_runs):
    ops, guided, plain = impute_runs
    imp = max(float(np.max(np.abs(op.f(x) - op.target))) for op, x in zip(ops, guided.samples))
    imp_plain = max(float(np.max(np.abs(op.f(x) - op.target))) for op, x in zip(ops, plain.samples))
    _, sr_ops, sr = superres_runs
    sr_res = max(op.residual(x) for op, x in zip(sr_ops, sr.samples))

    rng = np.random.default_rng(5)
    idx = rng.choice(len(desk.test), 50, replace=False)
    targets = [desk.test.profiles[i] for i in idx]
    pt_ops = [PeakTotalProjection(p.valid_len, targets=derive_numeric_conditions(p)) for p in targets]
    pt = sample(desk.net, desk.cond(targets), np.array([p.valid_len for p in targets]), desk.T, 50,
                guidance=GuidanceSpec(pt_ops), schedule=FlowSchedule(n_steps=100), seed=55)
    pt_res = max(op.residual(x) for op, x in zip(pt_ops, pt.samples))
    ok = imp == 0.0 and imp_plain == 0.0 and sr_res <= 1e-6 and pt_res <= 1e-6
    record(5, ok, f"impute residual {imp:.1e} (guided) / {imp_plain:.1e} (unguided) over 200 samples; "
                  f"superres max ||Dx-y||_inf {sr_res:.1e} over {len(sr_ops)}; peak/min/avg {pt_res:.1e} over 50")
    assert ok


def test_criterion_06_guidance_reduces_residual(impute_runs):
    ops, guided, plain = impute_runs
    rg = np.array([op.residual(x, ord=2) for op, x in zip(ops, guided.pre_projection)])
    ru = np.array([op.residual(x, ord=2) for op, x in zip(ops, plain.pre_projection)])
    frac = float(np.mean(rg < ru))
    ok = frac >= 0.95
    record(6, ok, f"guided < unguided pre-projection residual in {frac:.0%} of 100 trials "
                  f"(median {np.median(rg):.2e} vs {np.median(ru):.2e}), S=500")
    assert ok


# ---------------------------------------------------------------------------
# 7. super-resolution vs interpolation


def test_criterion_07_superres_beats_interpolation(superres_runs):
    targets, _, res = superres_runs
    m = SUPERRES_MEMBERS
    wins, gen_scores, lin_scores = 0, [], []
    for k, p in enumerate(targets):
        members = res.samples[k * m : (k + 1) * m, : p.valid_len]
        y = downsample(p.values, 16, p.valid_len)
        lin = upsample(y, 16, "linear")
        c_gen = crps(members, p.valid)
        c_lin = crps(lin[None], p.valid)
        gen_scores.append(c_gen)
        lin_scores.append(c_lin)
        wins += c_gen < c_lin
    frac = wins / len(targets)
    ok = frac >= 0.8
    record(7, ok, f"guided CRPS < linear CRPS in {frac:.0%} of 100 profiles (mean {np.mean(gen_scores):.4f} vs "
                  f"{np.mean(lin_scores):.4f}), 16x, m={m}, S={SUPERRES_STEPS}")
    assert ok


# ---------------------------------------------------------------------------
# 8. CRPS oracle


def test_criterion_08_crps_oracle():
    rng = np.random.default_rng(8)
    worst = abs(crps([0.0, 2.0], 1.0) - 0.5)
    cases = 1
    for m in range(1, 5):
        for _ in range(500):
            ens = rng.normal(size=m)
            if rng.uniform() < 0.2:
                ens[0] = ens[-1]  # ties
            obs = ens[0] if rng.uniform() < 0.1 else rng.normal()
            worst = max(worst, abs(crps(ens, obs) - crps_integral(ens, obs)))
            cases += 1
    ok = worst <= 1e-10
    record(8, ok, f"max |estimator - integral| = {worst:.1e} over {cases} ensembles of size <= 4; "
                  f"{{0,2}} vs 1 -> {crps([0.0, 2.0], 1.0)}")
    assert ok


# ---------------------------------------------------------------------------
# 9. calibration


def test_criterion_09_permutation_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    rejections = 0
    for trial in range(200):
        X = rng.normal(size=(50, 24))
        Y = rng.normal(size=(50, 24))
        rejections += permutation_test(X, Y, 1000, seed=trial).p_value <= 0.05
    rate = rejections / 200
    elapsed = time.perf_counter() - t0
    ok = 0.01 <= rate <= 0.12 and elapsed <= 300
    record(9, ok, f"null rejection rate {rate:.3f} at alpha=0.05 over 200 trials (1000 permutations each), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 10. projection oracles


def test_criterion_10_projection_oracles():
    rng = np.random.default_rng(10)
    err, idem = 0.0, 0.0
    for _ in range(500):
        n = int(rng.integers(1, 13))
        k = int(rng.integers(0, n + 1))
        obs = np.sort(rng.choice(n, k, replace=False))
        x, vals = rng.normal(size=n), rng.normal(size=k)
        out = project_observed(x, obs, vals)
        ref = kkt_projection(x, selection_matrix(obs, n), vals) if k else x
        err = max(err, float(np.max(np.abs(out - ref))))
        idem = max(idem, float(np.max(np.abs(project_observed(out, obs, vals) - out))))

        L = int(rng.integers(1, 7))
        nb = int(rng.integers(1, 12 // L + 1))
        x, y = rng.normal(size=nb * L), rng.normal(size=nb)
        out = project_block_average(x, y, L)
        err = max(err, float(np.max(np.abs(out - kkt_projection(x, block_matrix(nb, L), y)))))
        idem = max(idem, float(np.max(np.abs(project_block_average(out, y, L) - out))))

        n = int(rng.integers(3, 13))
        lo, hi = np.sort(rng.uniform(-1, 1, 2))
        avg = lo + (hi - lo) * rng.uniform(1.0 / n, 1 - 1.0 / n)
        out = project_peak_total(rng.normal(size=n), (hi, lo, avg))
        idem = max(idem, float(np.max(np.abs(project_peak_total(out, (hi, lo, avg)) - out))))
    ok = err <= 1e-8 and idem <= 1e-9
    record(10, ok, f"max deviation from KKT oracle {err:.1e}; max idempotence defect {idem:.1e} (500 instances each)")
    assert ok


# ---------------------------------------------------------------------------
# 11. scaler


def test_criterion_11_scaler_exactness():
    cfg = SynthConfig(months=(1, 4, 7, 10), years=(2022,))
    ds = synth_dataset(11, 60, cfg)
    model = scaler_fit(ds.subset("train"))
    worst_max = worst_sum = 0.0
    exact = fallback = fallback_ok = 0
    for p in ds.subset("test").profiles:
        T = p.valid_len
        y_max, y_sum = float(p.valid.max()), math.fsum(p.valid)
        if not y_max > 0:
            continue
        res = scaler_generate(model, p.category, p.month, y_max, y_sum)
        if res.peak_constrained:
            exact += 1
            worst_max = max(worst_max, abs(res.profile.max() - y_max) / T)
            worst_sum = max(worst_sum, abs(math.fsum(res.profile) - y_sum) / T)
        else:
            fallback += 1
            mean = model.means[(p.category, p.month)]
            fallback_ok += bool(np.allclose(res.profile, mean * (y_sum / math.fsum(mean)), rtol=1e-12, atol=0))
    ok = exact > 0 and fallback > 0 and fallback_ok == fallback and worst_max <= 1e-9 and worst_sum <= 1e-9
    record(11, ok, f"{exact} exact solves: max |max-y_m|/T {worst_max:.1e}, |sum-y_s|/T {worst_sum:.1e}; "
                   f"{fallback_ok}/{fallback} no-root cases fall back to average scaling")
    assert ok


# ---------------------------------------------------------------------------
# 12. one checkpoint for every task


def test_criterion_12_single_model(desk, tmp_path):
    write_profiles_csv(tmp_path / "targets.csv", desk.test.profiles[:3])
    payloads = {
        "generate": None,
        "constrained": {"kind": "peak_total", "payload": {}},
        "impute": {"kind": "impute", "payload": {"mask": {"rate": 0.2, "min_block": 5, "max_block": 96}}},
        "superres": {"kind": "superres", "payload": {"block_len": 16}},
    }
    sums, codes = {}, {}
    for cmd, guidance in payloads.items():
        doc = {"checkpoint_path": str(desk.ckpt_path), "source": {"csv": "targets.csv", "row": 1},
               "schedule": {"n_steps": 10}, "seed": 12, "n_samples": 2}
        if guidance:
            doc["guidance"] = guidance
        (tmp_path / f"{cmd}.json").write_text(json.dumps(doc))
        codes[cmd] = cli_main([cmd, "--manifest", str(tmp_path / f"{cmd}.json"), "--out", str(tmp_path / cmd)])
        if codes[cmd] == 0:
            sums[cmd] = json.loads((tmp_path / cmd / "manifest.json").read_text())["params_checksum"]
    ok = all(c == 0 for c in codes.values()) and len(set(sums.values())) == 1 and len(sums) == 4
    record(12, ok, f"exit codes {codes}; distinct parameter checksums across manifests: {len(set(sums.values()))}")
    assert ok
