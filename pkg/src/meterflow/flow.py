"""Conditional flow matching: training, Euler sampling and projection guidance."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import NumericError
from .nn import NetConfig, VelocityNet

log = logging.getLogger(__name__)

Velocity = Callable[..., Tensor]


@dataclass(frozen=True)
class FlowSchedule:
    """Uniform Euler grid ``t_i = i / n_steps``, ``i = 0..n_steps-1``."""

    n_steps: int = 500
    t_floor: float = 1e-3
    delta: float = 1e-4

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 < self.t_floor < 1 or not 0 < self.delta < 1:
            raise ValueError("t_floor and delta must lie in (0, 1)")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) / self.n_steps


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    n_iters: int = 1000
    ema_decay: float = 0.999
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t_floor: float = 1e-3
    log_every: int = 100
    val_every: int = 1000
    val_batches: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.n_iters < 0:
            raise ValueError("batch_size must be >= 1 and n_iters >= 0")


# ---------------------------------------------------------------------------
# closed-form pieces


def interpolate(x0, x1, t):
    """Point ``t x1 + (1 - t) x0`` on the straight noise-to-data path; ``t`` may be per row."""
    if torch.is_tensor(x0):
        t = torch.as_tensor(t, dtype=x0.dtype)
    else:
        x0, x1, t = np.asarray(x0, dtype=float), np.asarray(x1, dtype=float), np.asarray(t, dtype=float)
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return t * x1 + (1 - t) * x0


def velocity_from_score(x_t, t: float, score, t_floor: float = 1e-3):
    """``a_t x_t + b_t score`` with ``a_t = 1/t`` and ``b_t = (1-t)/t``; t is clamped to ``t_floor``."""
    t = max(float(t), t_floor)
    return x_t / t + (1 - t) / t * score


def estimate_x1(x_t, t, u):
    """One-step destination estimate ``x_t + (1 - t) u``."""
    return x_t + (1 - t) * u


def guidance_weight(t: float, delta: float = 1e-4) -> float:
    return 1.0 / (1.0 - min(t, 1.0 - delta))


def guidance_term(x_hat: np.ndarray, t: float, project: Callable[[np.ndarray], np.ndarray], delta: float = 1e-4) -> np.ndarray:
    """``w_t [P(x_hat) - x_hat]``."""
    return guidance_weight(t, delta) * (project(x_hat) - x_hat)


# ---------------------------------------------------------------------------
# training


def _valid_mask(valid_len: Tensor, T: int, dtype) -> Tensor:
    return (torch.arange(T)[None, :] < valid_len[:, None]).to(dtype)


def cfm_loss(
    velocity: Velocity,
    x1: Tensor,
    cond: Mapping[str, Tensor],
    valid_len: Tensor,
    generator: torch.Generator | None = None,
    *,
    t_floor: float = 1e-3,
    x0: Tensor | None = None,
    t: Tensor | None = None,
) -> Tensor:
    """Batch mean of ``sum_valid (u(x_t, t, y1) - (x1 - x0))^2 / valid_len``.

    ``x0`` and ``t`` are drawn from ``generator`` unless given.
    """
    B, T = x1.shape
    if x0 is None:
        x0 = torch.randn(B, T, generator=generator, dtype=x1.dtype)
    if t is None:
        t = t_floor + (1 - t_floor) * torch.rand(B, generator=generator, dtype=x1.dtype)
    xt = interpolate(x0, x1, t)
    pred = velocity(xt, t, cond, valid_len)
    mask = _valid_mask(valid_len, T, x1.dtype)
    err = ((pred - (x1 - x0)) * mask).pow(2).sum(dim=1) / valid_len.to(x1.dtype)
    return err.mean()


@dataclass
class TrainingData:
    """Tensors the training loop samples mini-batches from."""

    x: Tensor
    valid_len: Tensor
    cond: dict[str, Tensor]

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_dataset(cls, ds, encoder, dtype=torch.float32) -> "TrainingData":
        x, v = ds.stack()
        cond = encoder.encode_many(ds.profiles)
        return cls(
            torch.as_tensor(x, dtype=dtype),
            torch.as_tensor(v),
            {k: torch.as_tensor(c) for k, c in cond.items()},
        )

    def batch(self, idx: Tensor) -> tuple[Tensor, dict[str, Tensor], Tensor]:
        return self.x[idx], {k: c[idx] for k, c in self.cond.items()}, self.valid_len[idx]


@dataclass
class TrainState:
    net: VelocityNet
    ema: VelocityNet
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> NetConfig:
        return self.net.cfg


def make_optimizer(net: VelocityNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        net.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def init_state(net_cfg: NetConfig, cfg: TrainConfig) -> TrainState:
    net = VelocityNet(net_cfg, seed=cfg.seed)
    ema = copy.deepcopy(net).requires_grad_(False)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(net, ema, make_optimizer(net, cfg), gen)


@torch.no_grad()
def ema_update(ema: torch.nn.Module, net: torch.nn.Module, decay: float) -> None:
    """``ema <- decay * ema + (1 - decay) * raw``."""
    for pe, p in zip(ema.parameters(), net.parameters()):
        pe.mul_(decay).add_(p.detach(), alpha=1 - decay)


@torch.no_grad()
def validation_loss(net: VelocityNet, data: TrainingData, cfg: TrainConfig) -> float:
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    losses = []
    for _ in range(cfg.val_batches):
        idx = torch.randint(len(data), (min(cfg.batch_size * 4, len(data)),), generator=gen)
        x1, cond, v = data.batch(idx)
        losses.append(float(cfm_loss(net, x1, cond, v, gen, t_floor=cfg.t_floor)))
    return float(np.mean(losses))


def train(
    data: TrainingData,
    net_cfg: NetConfig,
    cfg: TrainConfig,
    *,
    val: TrainingData | None = None,
    state: TrainState | None = None,
    checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Mini-batch flow-matching training with AdamW and an EMA copy of the weights.

    Passing ``state`` resumes: the iteration counter continues from it and
    ``cfg.n_iters`` more steps are taken. ``checkpoint`` is called every
    ``cfg.checkpoint_every`` steps, at the end, and with the last finite state
    before a :class:`NumericError` is raised for a non-finite loss.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if state is None:
        state = init_state(net_cfg, cfg)
    net, ema, opt, gen = state.net, state.ema, state.optimizer, state.generator
    dtype = net_cfg.dtype
    data = TrainingData(data.x.to(dtype), data.valid_len, data.cond)
    net.train()
    stop = state.iteration + cfg.n_iters
    while state.iteration < stop:
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        x1, cond, v = data.batch(idx)
        loss = cfm_loss(net, x1, cond, v, gen, t_floor=cfg.t_floor)
        if not torch.isfinite(loss):
            if checkpoint is not None:
                checkpoint(state)
            raise NumericError(f"non-finite loss at iteration {state.iteration}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema_update(ema, net, cfg.ema_decay)
        state.iteration += 1
        it = state.iteration
        record = {"iter": it, "loss": float(loss.detach())}
        if val is not None and cfg.val_every and it % cfg.val_every == 0:
            record["val_loss"] = validation_loss(net, val, cfg)
        state.history.append(record)
        if cfg.log_every and it % cfg.log_every == 0:
            recent = np.mean([h["loss"] for h in state.history[-cfg.log_every :]])
            log.info("iter %d loss %.5f", it, recent)
        if checkpoint is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            checkpoint(state)
    net.eval()
    if checkpoint is not None:
        checkpoint(state)
    return state


def smoothed_losses(history: Sequence[dict], window: int = 100) -> np.ndarray:
    losses = np.array([h["loss"] for h in history])
    if losses.size < window:
        return losses
    kernel = np.ones(window) / window
    return np.convolve(losses, kernel, mode="valid")


# ---------------------------------------------------------------------------
# sampling


@dataclass
class GuidanceSpec:
    """Projection guidance; ``projector`` is one op for every sample or one op per sample."""

    projector: object
    enabled: bool = True
    final_hard_projection: bool = True

    def ops_for(self, start: int, stop: int) -> list:
        if isinstance(self.projector, Sequence):
            return list(self.projector[start:stop])
        return [self.projector] * (stop - start)


@dataclass
class SampleResult:
    samples: np.ndarray
    pre_projection: np.ndarray
    valid_len: np.ndarray


def _project_rows(ops: Sequence, x: np.ndarray) -> np.ndarray:
    return np.stack([op.project(row) for op, row in zip(ops, x)])


def initial_noise(seed: int, start: int, stop: int, T: int) -> np.ndarray:
    """Per-trajectory N(0, I) draws seeded by ``(seed, sample index)``."""
    return np.stack([np.random.default_rng([seed, i]).standard_normal(T) for i in range(start, stop)])


def _broadcast_conditions(cond: Mapping, n: int) -> dict[str, np.ndarray]:
    out = {}
    for k, v in cond.items():
        v = np.asarray(v, dtype=np.int64)
        out[k] = np.full(n, int(v)) if v.ndim == 0 else v
        if out[k].shape != (n,):
            raise ValueError(f"condition {k!r} has shape {out[k].shape}, expected ({n},)")
    return out


@torch.no_grad()
def sample(
    velocity: Velocity,
    cond: Mapping,
    valid_len,
    length: int,
    n_samples: int,
    *,
    guidance: GuidanceSpec | None = None,
    schedule: FlowSchedule = FlowSchedule(),
    seed: int = 0,
    batch_size: int = 256,
    clip_margin: float | None = None,
    x0: np.ndarray | None = None,
) -> SampleResult:
    """Integrate the (optionally guided) flow ODE from noise with explicit Euler steps.

    ``cond`` maps condition names to scalars or ``(n_samples,)`` arrays.
    ``velocity`` is a :class:`VelocityNet` (use the EMA copy) or any callable
    with the same signature. The state is kept in float64.
    """
    cond = _broadcast_conditions(cond, n_samples)
    valid = np.asarray(valid_len, dtype=np.int64)
    valid = np.full(n_samples, int(valid)) if valid.ndim == 0 else valid
    dtype = velocity.cfg.dtype if isinstance(velocity, VelocityNet) else torch.float64
    use_guidance = guidance is not None and guidance.enabled
    dt = schedule.dt

    samples, pre = [], []
    for start in range(0, n_samples, batch_size):
        stop = min(start + batch_size, n_samples)
        x = initial_noise(seed, start, stop, length) if x0 is None else np.array(x0[start:stop], dtype=float)
        c = {k: torch.as_tensor(v[start:stop]) for k, v in cond.items()}
        v_t = torch.as_tensor(valid[start:stop])
        ops = guidance.ops_for(start, stop) if guidance is not None else None
        for i, t in enumerate(schedule.times):
            u = velocity(torch.as_tensor(x, dtype=dtype), torch.full((stop - start,), t, dtype=dtype), c, v_t)
            u = u.double().numpy()
            step = u
            if use_guidance:
                x_hat = estimate_x1(x, t, u)
                step = u + guidance_term(x_hat, t, lambda z: _project_rows(ops, z), schedule.delta)
            x = x + step * dt
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite state at step {i} (t={t:.4f})")
        mask = np.arange(length)[None, :] < valid[start:stop, None]
        x = x * mask
        pre.append(x.copy())
        if guidance is not None and guidance.final_hard_projection:
            x = _project_rows(ops, x) * mask
        if clip_margin is not None:
            x = np.clip(x, -1 - clip_margin, 1 + clip_margin) * mask
        samples.append(x)
    return SampleResult(np.concatenate(samples), np.concatenate(pre), valid)
