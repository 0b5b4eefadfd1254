"""Little-endian binary checkpoints holding raw and EMA weights.

Layout::

    b"MFCK"  u32 format_version  u32 header_len  header (UTF-8 JSON)
    u32 n_tensors
    repeated: u32 name_len, name, u8 dtype, u32 ndim, u64[ndim] shape, raw data

Tensor names carry their parameter set as a prefix: ``raw/``, ``ema/``,
``adam_m/``, ``adam_v/``.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .flow import TrainConfig, TrainState, make_optimizer
from .nn import NetConfig, VelocityNet

MAGIC = b"MFCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


@dataclass
class Checkpoint:
    config: NetConfig
    tensors: dict[str, dict[str, np.ndarray]]
    meta: dict = field(default_factory=dict)

    def state_dict(self, which: str = "ema") -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.tensors[which].items()}

    def load_net(self, which: str = "ema") -> VelocityNet:
        net = VelocityNet(self.config)
        net.load_state_dict(self.state_dict(which))
        net.eval().requires_grad_(False)
        return net

    def checksum(self, which: str = "ema") -> str:
        return params_checksum(self.tensors[which])


def params_checksum(params) -> str:
    """SHA-256 over names and little-endian bytes in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name]
        arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _np_state(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps({"net_config": ckpt.config.to_dict(), "meta": ckpt.meta}).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    flat = [(f"{group}/{name}", arr) for group, arrs in ckpt.tensors.items() for name, arr in arrs.items()]
    buf.write(struct.pack("<I", len(flat)))
    for name, arr in flat:
        arr = np.asarray(arr)
        code = _CODES[arr.dtype.newbyteorder("=")]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        bname = name.encode()
        buf.write(struct.pack("<I", len(bname)))
        buf.write(bname)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(raw)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + hlen].decode())
    off += hlen
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BI", data, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += count * dt.itemsize
        group, _, pname = name.partition("/")
        tensors.setdefault(group, {})[pname] = arr
    return Checkpoint(NetConfig(**header["net_config"]), tensors, header.get("meta", {}))


def checkpoint_from_state(state: TrainState, meta: dict | None = None) -> Checkpoint:
    tensors = {"raw": _np_state(state.net), "ema": _np_state(state.ema)}
    names = dict(state.net.named_parameters())
    opt_state = state.optimizer.state
    steps = []
    for group in ("exp_avg", "exp_avg_sq"):
        key = "adam_m" if group == "exp_avg" else "adam_v"
        tensors[key] = {}
        for n, p in names.items():
            if p in opt_state and group in opt_state[p]:
                tensors[key][n] = opt_state[p][group].detach().numpy().copy()
                steps.append(float(opt_state[p]["step"]))
    meta = dict(meta or {})
    meta["iteration"] = state.iteration
    meta["adam_step"] = max(steps) if steps else 0.0
    meta["generator_state"] = state.generator.get_state().tolist()
    return Checkpoint(state.net.cfg, tensors, meta)


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    """Rebuild a resumable training state (weights, EMA, Adam moments, RNG, iteration)."""
    net = VelocityNet(ckpt.config)
    net.load_state_dict(ckpt.state_dict("raw"))
    ema = copy.deepcopy(net).requires_grad_(False)
    ema.load_state_dict(ckpt.state_dict("ema"))
    opt = make_optimizer(net, cfg)
    step = torch.tensor(float(ckpt.meta.get("adam_step", 0.0)))
    for n, p in net.named_parameters():
        if n in ckpt.tensors.get("adam_m", {}):
            opt.state[p] = {
                "step": step.clone(),
                "exp_avg": torch.from_numpy(ckpt.tensors["adam_m"][n].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors["adam_v"][n].copy()),
            }
    gen = torch.Generator()
    if "generator_state" in ckpt.meta:
        gen.set_state(torch.tensor(ckpt.meta["generator_state"], dtype=torch.uint8))
    else:
        gen.manual_seed(cfg.seed)
    return TrainState(net, ema, opt, gen, iteration=int(ckpt.meta.get("iteration", 0)))


def save_state(path, state: TrainState, meta: dict | None = None) -> Checkpoint:
    ckpt = checkpoint_from_state(state, meta)
    write_checkpoint(path, ckpt)
    return ckpt
