import numpy as np
import pytest
import torch
from conftest import random_cond, tiny_config

from meterflow.checkpoint import checkpoint_from_state, state_from_checkpoint
from meterflow.data import ConditionEncoder, SynthConfig, synth_dataset
from meterflow.errors import NumericError
from meterflow.flow import (
    FlowSchedule,
    GuidanceSpec,
    TrainConfig,
    TrainingData,
    cfm_loss,
    estimate_x1,
    guidance_term,
    guidance_weight,
    init_state,
    initial_noise,
    interpolate,
    sample,
    smoothed_losses,
    train,
    velocity_from_score,
)
from meterflow.nn import VelocityNet
from meterflow.tasks import ImputeProjection, SuperResProjection


class TestClosedForm:
    def test_interpolate_endpoints(self):
        x0, x1 = np.array([1.0, 2.0]), np.array([5.0, -1.0])
        np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
        np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
        np.testing.assert_allclose(interpolate(np.stack([x0, x0]), np.stack([x1, x1]), [0.0, 0.5])[1], [3.0, 0.5])

    def test_score_form_matches_point_mass_velocity(self):
        # for a single data point x1 the marginal is N(t x1, (1-t)^2 I)
        rng = np.random.default_rng(0)
        x1, x = rng.normal(size=5), rng.normal(size=5)
        for t in (0.1, 0.5, 0.9):
            score = -(x - t * x1) / (1 - t) ** 2
            np.testing.assert_allclose(velocity_from_score(x, t, score), (x1 - x) / (1 - t), rtol=1e-12)

    def test_score_form_clamps(self):
        assert np.isfinite(velocity_from_score(np.ones(2), 0.0, np.ones(2))).all()

    def test_estimate_and_guidance(self):
        x, u = np.array([0.2, 0.4]), np.array([1.0, -1.0])
        np.testing.assert_allclose(estimate_x1(x, 0.75, u), [0.45, 0.15])
        assert guidance_weight(0.5) == 2.0
        assert guidance_weight(1.0, 1e-4) == pytest.approx(1e4)
        g = guidance_term(np.array([1.0, 1.0]), 0.5, lambda z: np.zeros_like(z))
        np.testing.assert_allclose(g, [-2.0, -2.0])

    def test_schedule(self):
        s = FlowSchedule(n_steps=4)
        assert s.dt == 0.25
        np.testing.assert_array_equal(s.times, [0, 0.25, 0.5, 0.75])
        with pytest.raises(ValueError):
            FlowSchedule(n_steps=0)


class TestLoss:
    def test_manual(self):
        x1 = torch.tensor([[1.0, 2.0, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5]], dtype=torch.float64)
        x0 = torch.zeros_like(x1)
        v = torch.tensor([2, 4])
        zero_velocity = lambda x, t, c, vl: torch.zeros_like(x)
        loss = cfm_loss(zero_velocity, x1, {}, v, x0=x0, t=torch.tensor([0.3, 0.3], dtype=torch.float64))
        assert float(loss) == pytest.approx(0.5 * ((1 + 4) / 2 + 1.0 / 4))

    def test_padding_ignored(self):
        x1 = torch.tensor([[1.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
        def bad_tail(x, t, c, vl):
            out = x1 - x0
            out = out.clone()
            out[:, 2:] = 100.0
            return out
        x0 = torch.randn(1, 4, dtype=torch.float64)
        loss = cfm_loss(bad_tail, x1, {}, torch.tensor([2]), x0=x0, t=torch.tensor([0.5], dtype=torch.float64))
        assert float(loss) == 0.0

    def test_t_range(self):
        seen = []
        def rec(x, t, c, vl):
            seen.append(t.clone())
            return torch.zeros_like(x)
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            cfm_loss(rec, torch.zeros(64, 4), {}, torch.full((64,), 4), g, t_floor=0.2)
        t = torch.cat(seen)
        assert float(t.min()) >= 0.2 and float(t.max()) < 1.0


def _tiny_data(n=12, T=16):
    cfg = SynthConfig(period="week", weeks_per_month=1, steps_per_day=2, months=(1, 7), years=(2022,))
    ds = synth_dataset(0, n, cfg)
    enc = ConditionEncoder(cfg.categories, cfg.years)
    data = TrainingData.from_dataset(ds, enc, dtype=torch.float64)
    assert data.x.shape[1] == 14
    # pad to a patch multiple
    x = torch.nn.functional.pad(data.x, (0, T - 14))
    return TrainingData(x, data.valid_len, data.cond), enc


class TestTraining:
    def test_loss_decreases(self):
        data, enc = _tiny_data()
        ncfg = tiny_config(cond_vocab_sizes=tuple(enc.vocab_sizes))
        st = train(data, ncfg, TrainConfig(batch_size=8, learning_rate=3e-3, n_iters=300, log_every=0))
        s = smoothed_losses(st.history, 50)
        assert s[-1] < 0.6 * s[0]
        assert st.iteration == 300

    def test_ema_tracks(self):
        data, enc = _tiny_data()
        ncfg = tiny_config(cond_vocab_sizes=tuple(enc.vocab_sizes))
        st = train(data, ncfg, TrainConfig(batch_size=4, n_iters=5, ema_decay=0.0, log_every=0))
        for p, q in zip(st.net.parameters(), st.ema.parameters()):
            assert torch.equal(p, q)

    def test_resume_is_exact(self):
        data, enc = _tiny_data()
        ncfg = tiny_config(cond_vocab_sizes=tuple(enc.vocab_sizes))
        cfg = TrainConfig(batch_size=4, learning_rate=1e-3, n_iters=10, log_every=0)
        full = train(data, ncfg, cfg)
        half_cfg = TrainConfig(batch_size=4, learning_rate=1e-3, n_iters=5, log_every=0)
        half = train(data, ncfg, half_cfg)
        resumed = state_from_checkpoint(checkpoint_from_state(half), half_cfg)
        resumed = train(data, ncfg, half_cfg, state=resumed)
        assert resumed.iteration == 10
        for (n, p), q in zip(full.net.named_parameters(), resumed.net.parameters()):
            torch.testing.assert_close(p, q, atol=1e-12, rtol=0, msg=n)
        for p, q in zip(full.ema.parameters(), resumed.ema.parameters()):
            torch.testing.assert_close(p, q, atol=1e-12, rtol=0)

    def test_nan_loss_raises_after_checkpoint(self):
        data, enc = _tiny_data()
        ncfg = tiny_config(cond_vocab_sizes=tuple(enc.vocab_sizes))
        cfg = TrainConfig(batch_size=4, n_iters=3, log_every=0)
        state = init_state(ncfg, cfg)
        with torch.no_grad():
            state.net.proj.bias.fill_(float("nan"))
        saved = []
        with pytest.raises(NumericError, match="iteration 0"):
            train(data, ncfg, cfg, state=state, checkpoint=saved.append)
        assert saved == [state]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(ema_decay=1.5)


class TestSampling:
    @pytest.mark.parametrize("S", [1, 10, 500])
    def test_straight_path_exact(self, S):
        rng = np.random.default_rng(S)
        x1 = rng.uniform(-1, 1, size=(3, 8))
        x0 = rng.normal(size=(3, 8))
        oracle = lambda x, t, c, v: torch.as_tensor(x1 - x0)
        res = sample(oracle, {}, 8, 8, 3, schedule=FlowSchedule(n_steps=S), x0=x0)
        assert np.max(np.abs(res.samples - x1)) < 1e-12

    def test_guided_last_step_lands_on_projection(self):
        # with w dt = 1 at the final step the state equals P(x_hat) even without the hard projection
        op = ImputeProjection(6, indices=np.array([0, 3]), values=np.array([0.7, -0.2]))
        drift = lambda x, t, c, v: torch.as_tensor(np.sin(x.numpy()) + 0.3)
        spec = GuidanceSpec(op, final_hard_projection=False)
        res = sample(drift, {}, 6, 6, 4, guidance=spec, schedule=FlowSchedule(n_steps=7), seed=1)
        assert np.max(np.abs(res.samples[:, [0, 3]] - [0.7, -0.2])) < 1e-12

    def test_hard_projection_and_padding(self):
        op = SuperResProjection(8, values=np.array([0.1, -0.3]), block_len=4)
        drift = lambda x, t, c, v: torch.zeros_like(x)
        res = sample(drift, {}, 8, 12, 3, guidance=GuidanceSpec(op, enabled=False), schedule=FlowSchedule(n_steps=3))
        assert np.all(res.samples[:, 8:] == 0) and np.all(res.pre_projection[:, 8:] == 0)
        assert max(op.residual(s) for s in res.samples) <= 1e-12
        assert max(op.residual(s) for s in res.pre_projection) > 1e-3

    def test_noise_independent_of_batching(self, tiny_cfg):
        net = VelocityNet(tiny_cfg)
        with torch.no_grad():
            net.proj.bias.fill_(0.1)
        cond = {k: int(v[0]) for k, v in random_cond(1).items()}
        a = sample(net, cond, 16, 16, 5, schedule=FlowSchedule(n_steps=4), seed=3, batch_size=2)
        b = sample(net, cond, 16, 16, 5, schedule=FlowSchedule(n_steps=4), seed=3)
        np.testing.assert_allclose(a.samples, b.samples, atol=1e-12)
        np.testing.assert_array_equal(initial_noise(3, 2, 4, 16), initial_noise(3, 0, 4, 16)[2:])

    def test_non_finite_state(self):
        exploding = lambda x, t, c, v: torch.full_like(x, float("inf"))
        with pytest.raises(NumericError, match="step 0"):
            sample(exploding, {}, 4, 4, 1, schedule=FlowSchedule(n_steps=2))

    def test_condition_shape_checked(self):
        with pytest.raises(ValueError):
            sample(lambda x, t, c, v: torch.zeros_like(x), {"year": np.zeros(3)}, 4, 4, 2)


def test_guidance_vanishes_when_feasible():
    rng = np.random.default_rng(0)
    imp = ImputeProjection(8, indices=np.array([1, 6]), values=np.array([0.3, -0.4]))
    sr = SuperResProjection(8, values=np.array([0.25, -0.5]), block_len=4)
    x_imp, x_sr = imp(rng.normal(size=8)), sr(rng.normal(size=8))
    for t in (0.0, 0.3, 0.9999):
        assert np.all(guidance_term(x_imp, t, imp.project) == 0)
        # block means of a feasible point are recomputed, so only rounding is left
        assert np.max(np.abs(guidance_term(x_sr, t, sr.project))) <= 1e-15 * guidance_weight(t)


def test_ema_matches_scalar_reference(tiny_cfg):
    data, enc = _tiny_data()
    ncfg = tiny_config(cond_vocab_sizes=tuple(enc.vocab_sizes))
    cfg = TrainConfig(batch_size=4, n_iters=1, ema_decay=0.9, log_every=0, learning_rate=1e-2)
    st = init_state(ncfg, cfg)
    ref = {n: p.detach().clone() for n, p in st.ema.named_parameters()}
    for _ in range(3):
        train(data, ncfg, cfg, state=st)
        for n, p in st.net.named_parameters():
            ref[n] = 0.9 * ref[n] + 0.1 * p.detach()
    for n, p in st.ema.named_parameters():
        torch.testing.assert_close(p, ref[n], atol=1e-12, rtol=0, msg=n)


def test_seeded_training_is_reproducible():
    data, enc = _tiny_data()
    ncfg = tiny_config(cond_vocab_sizes=tuple(enc.vocab_sizes))
    cfg = TrainConfig(batch_size=4, n_iters=8, log_every=0)
    a, b = train(data, ncfg, cfg), train(data, ncfg, cfg)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    for p, q in zip(a.net.parameters(), b.net.parameters()):
        assert torch.equal(p, q)
