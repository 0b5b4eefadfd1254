"""Transformer velocity network u(x_t, t, y1) for padded 1-D load profiles.

Pipeline: fold ``patch_len`` steps into channels, large-kernel convolution to
``model_dim``, add the weekday-aligned positional embedding, run ``n_layers``
Transformer layers (multi-modal attention over series + condition tokens and
an MLP, both adaLN-modulated and valid-step masked), layer norm, linear
projection back to ``patch_len`` channels, unfold.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import CONDITION_FIELDS
from .errors import NumericError, StateError

DTYPES = {"f32": torch.float32, "f64": torch.float64}
TIME_SCALE = 1000.0
LN_EPS = 1e-6


@dataclass(frozen=True)
class NetConfig:
    n_layers: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    n_heads: int = 4
    conv_kernel: int = 9
    patch_len: int = 4
    cond_vocab_sizes: tuple[int, ...] = (2, 12, 31, 7, 2, 2)
    steps_per_day: int = 96
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "cond_vocab_sizes", tuple(int(v) for v in self.cond_vocab_sizes))
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim={self.model_dim} not divisible by n_heads={self.n_heads}")
        if self.ff_dim < self.model_dim:
            raise ValueError("ff_dim must be >= model_dim")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be a positive odd integer")
        if len(self.cond_vocab_sizes) != len(CONDITION_FIELDS):
            raise ValueError(f"need {len(CONDITION_FIELDS)} vocab sizes, got {len(self.cond_vocab_sizes)}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        for name in ("n_layers", "model_dim", "ff_dim", "n_heads", "patch_len", "steps_per_day"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def desk(cls, **overrides) -> "NetConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "NetConfig":
        base = dict(n_layers=12, model_dim=128, ff_dim=512, n_heads=8)
        base.update(overrides)
        return cls(**base)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cond_vocab_sizes"] = list(self.cond_vocab_sizes)
        return d


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_pe(t, d: int) -> Tensor:
    """``PE_{2i}(t) = sin(t / 10000^{2i/d})``, ``PE_{2i+1}(t) = cos(...)``; shape ``(*t.shape, d)``."""
    t = torch.as_tensor(t)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    i = torch.arange((d + 1) // 2, dtype=t.dtype, device=t.device)
    angle = t[..., None] / 10000.0 ** (2 * i / d)
    out = torch.empty(*t.shape, d, dtype=t.dtype, device=t.device)
    out[..., 0::2] = torch.sin(angle)
    out[..., 1::2] = torch.cos(angle[..., : d // 2])
    return out


class PositionalEmbedding(nn.Module):
    """Sinusoidal features followed by a one-hidden-layer SiLU MLP."""

    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)

    def forward(self, t: Tensor) -> Tensor:
        pe = sinusoidal_pe(t.to(self.fc1.weight.dtype), self.d)
        return self.fc2(F.silu(self.fc1(pe)))


def aligned_pe(embed: PositionalEmbedding, t, first_weekday, steps_per_day: int) -> Tensor:
    """Embedding of step ``t`` shifted so the same weekday always gets the same position."""
    t = torch.as_tensor(t)
    w = torch.as_tensor(first_weekday)
    return embed(t + w * steps_per_day)


def step_mask(valid_len: Tensor, length: int) -> Tensor:
    """Boolean ``(B, length)`` mask, True on the first ``valid_len`` positions."""
    return torch.arange(length, device=valid_len.device)[None, :] < valid_len[:, None]


def layer_norm(x: Tensor) -> Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=LN_EPS)


class ModMLP(nn.Module):
    """``W2 SiLU(W1 y + b1) + b2``, one per modulation factor."""

    def __init__(self, d: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)

    def forward(self, y: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(y)))


class AdaLN(nn.Module):
    """Scale (lambda), shift (beta) and gate (sigma) computed from the condition vector."""

    def __init__(self, d: int):
        super().__init__()
        self.scale = ModMLP(d)
        self.shift = ModMLP(d)
        self.gate = ModMLP(d)

    def forward(self, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.scale(c), self.shift(c), self.gate(c)


def modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return scale[:, None, :] * layer_norm(x) + shift[:, None, :]


def adaln_modulate(x: Tensor, scale: Tensor, shift: Tensor, gate: Tensor, sublayer: Callable[[Tensor], Tensor]) -> Tensor:
    """``x + gate * sublayer(scale * LayerNorm(x) + shift)``; factors are per batch element."""
    return x + gate[:, None, :] * sublayer(modulate(x, scale, shift))


class MMAttention(nn.Module):
    """Multi-head attention over ``[x || cond]``; only the series positions are returned.

    Keys at padded series positions are masked out. Condition tokens are never
    masked. Queries are only formed for series positions because the condition
    outputs are discarded.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d, bias=False)  # a key bias cancels inside the softmax
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: Tensor, cond: Tensor | None = None, key_valid: Tensor | None = None) -> Tensor:
        B, N, d = x.shape
        H = self.n_heads
        seq = x if cond is None or cond.shape[1] == 0 else torch.cat([x, cond], dim=1)
        M = seq.shape[1]
        q = self.q(x).view(B, N, H, d // H).transpose(1, 2)
        k = self.k(seq).view(B, M, H, d // H).transpose(1, 2)
        v = self.v(seq).view(B, M, H, d // H).transpose(1, 2)
        mask = None
        if key_valid is not None and not bool(key_valid.all()):
            if M > N:
                key_valid = torch.cat([key_valid, key_valid.new_ones(B, M - N)], dim=1)
            mask = key_valid[:, None, None, :]
        # default SDPA scale is 1/sqrt(d/H)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(a.transpose(1, 2).reshape(B, N, d))


def masked_attention(attn: MMAttention, x: Tensor, valid_tokens: Tensor) -> Tensor:
    """Self-attention in which no position reads from padded positions."""
    return attn(x, None, step_mask(valid_tokens, x.shape[1]))


def mm_attention(attn: MMAttention, x: Tensor, cond_tokens: Tensor, valid_tokens: Tensor) -> Tensor:
    return attn(x, cond_tokens, step_mask(valid_tokens, x.shape[1]))


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(x)))


class TransformerLayer(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        d = cfg.model_dim
        self.attn_mod = AdaLN(d)
        self.attn = MMAttention(d, cfg.n_heads)
        self.ff_mod = AdaLN(d)
        self.ff = FeedForward(d, cfg.ff_dim)

    def forward(self, h: Tensor, c: Tensor, cond_tokens: Tensor | None, key_valid: Tensor | None) -> Tensor:
        scale, shift, gate = self.attn_mod(c)
        cond_in = None if cond_tokens is None else modulate(cond_tokens, scale, shift)
        h = adaln_modulate(h, scale, shift, gate, lambda z: self.attn(z, cond_in, key_valid))
        scale, shift, gate = self.ff_mod(c)
        return adaln_modulate(h, scale, shift, gate, self.ff)


# ---------------------------------------------------------------------------
# the network


class VelocityNet(nn.Module):
    """Velocity field ``u(x_t, t, y1)``.

    ``forward`` takes ``x`` of shape ``(B, T)``, ``t`` scalar or ``(B,)``, a
    mapping of condition codes ``(B,)`` keyed by :data:`CONDITION_FIELDS` and
    optional ``valid_len`` ``(B,)``. Output has the shape of ``x`` with the
    padded tail set to zero.
    """

    def __init__(self, cfg: NetConfig, seed: int = 0, *, use_cond_tokens: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_cond_tokens = use_cond_tokens
        d, P, k = cfg.model_dim, cfg.patch_len, cfg.conv_kernel
        self.conv_in = nn.Conv1d(P, d, k, padding=k // 2)
        self.pos_embed = PositionalEmbedding(d)
        self.time_embed = PositionalEmbedding(d)
        self.cond_embed = nn.ModuleList(nn.Embedding(v, d) for v in cfg.cond_vocab_sizes)
        self.cond_type = nn.Parameter(torch.zeros(len(cfg.cond_vocab_sizes), d))
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.n_layers))
        self.proj = nn.Linear(d, P)
        self._recorded: Tensor | None = None
        self.reset_parameters(seed)
        self.to(cfg.dtype)

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        """Truncated-normal(0.02) weights, zero biases, zero gates and output projection.

        Scale factors start at one so each block begins as a plain pre-norm residual.
        """
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.ndim >= 2:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
            else:
                p.zero_()
        self.cond_type.normal_(0.0, 0.02, generator=gen)
        for layer in self.layers:
            for mod in (layer.attn_mod, layer.ff_mod):
                mod.scale.fc2.bias.fill_(1.0)
                mod.gate.fc2.weight.zero_()
                mod.gate.fc2.bias.zero_()
        self.proj.weight.zero_()
        self.proj.bias.zero_()

    # -- pieces reused by tests

    def condition(self, t: Tensor, cond: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
        """Summed condition vector for adaLN and the ``(B, k, d)`` condition tokens."""
        embs = [emb(cond[name].long()) for emb, name in zip(self.cond_embed, CONDITION_FIELDS)]
        tokens = torch.stack(embs, dim=1)
        c = tokens.sum(dim=1) + self.time_embed(t * TIME_SCALE)
        return c, tokens + self.cond_type

    def forward(self, x: Tensor, t, cond: Mapping[str, Tensor], valid_len: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        dtype = self.proj.weight.dtype
        x = torch.as_tensor(x).to(dtype)
        B, T = x.shape
        P = cfg.patch_len
        if T % P:
            raise ValueError(f"length {T} not divisible by patch_len {P}")
        if not bool(torch.isfinite(x).all()):
            raise NumericError("non-finite values in network input")
        t = torch.as_tensor(t, dtype=dtype)
        if t.ndim == 0:
            t = t.expand(B)
        cond = {k: torch.as_tensor(v) for k, v in cond.items()}
        if valid_len is None:
            valid_len = torch.full((B,), T, dtype=torch.long)
        valid_len = torch.as_tensor(valid_len, dtype=torch.long)
        if bool((valid_len < 1).any()) or bool((valid_len > T).any()):
            raise ValueError("valid_len must be in [1, T]")
        if bool((valid_len % P != 0).any()):
            raise ValueError(f"valid_len must be a multiple of patch_len {P}")

        smask = step_mask(valid_len, T)
        x = x * smask
        N = T // P
        h = self.conv_in(x.view(B, N, P).transpose(1, 2)).transpose(1, 2)
        pos = torch.arange(N, dtype=dtype) * P
        h = h + aligned_pe(self.pos_embed, pos[None, :], cond["first_weekday"].to(dtype)[:, None], cfg.steps_per_day)

        c, tokens = self.condition(t, cond)
        if not self.use_cond_tokens:
            tokens = None
        key_valid = step_mask(valid_len // P, N)
        for layer in self.layers:
            h = layer(h, c, tokens, key_valid)
        out = self.proj(layer_norm(h)).reshape(B, T) * smask
        self._recorded = out if out.requires_grad else None
        return out

    def backward(self, grad_output: Tensor) -> dict[str, Tensor]:
        """Gradients of ``<grad_output, forward output>`` w.r.t. every parameter."""
        if self._recorded is None:
            raise StateError("backward called without a recorded forward pass")
        out, self._recorded = self._recorded, None
        names, params = zip(*self.named_parameters())
        grads = torch.autograd.grad(out, params, grad_output, allow_unused=True)
        return {n: torch.zeros_like(p) if g is None else g for n, p, g in zip(names, params, grads)}

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
