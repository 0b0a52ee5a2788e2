"""Conditional noise-prediction network.

Two length-preserving convolutional streams run side by side: the main stream
sees the diffused signal, the conditioner stream sees the noisy recording.
After every pair of half-normalized filter blocks a FiLM-style bridge modulates
the main stream with the conditioner features and an embedding of the noise
scale.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ContractError, NumericalDivergenceError, ParameterError

CHECKPOINT_MAGIC = b"SDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ScoreNetConfig:
    segment_len: int = 5000
    base_channels: int = 128
    n_blocks: int = 4
    kernel_sizes: tuple = (3, 5, 9)
    embed_dim: int = 128

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.base_channels < 2 or self.base_channels % 2:
            raise ParameterError("base_channels must be even")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ParameterError("kernel sizes must be odd")
        if self.n_blocks < 1:
            raise ParameterError("n_blocks must be >= 1")
        if self.segment_len < 1 or self.embed_dim < 2 or self.embed_dim % 2:
            raise ParameterError("segment_len must be positive and embed_dim even")


def noise_scale_embedding(sqrt_alpha_bar: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of the noise scale, treating ``1000 * scale`` as a position."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=sqrt_alpha_bar.dtype, device=sqrt_alpha_bar.device) / half
    )
    pos = 1000.0 * sqrt_alpha_bar.reshape(-1, 1)
    return torch.cat([torch.sin(pos * freqs), torch.cos(pos * freqs)], dim=1)


class HNFBlock(nn.Module):
    """Multi-kernel filter block with half instance normalization and a residual path."""

    def __init__(self, channels, kernel_sizes=(3, 5, 9), slope=0.2):
        super().__init__()
        self.channels = channels
        self.convs = nn.ModuleList(nn.Conv1d(channels, channels, k, padding=k // 2) for k in kernel_sizes)
        self.project = nn.Conv1d(channels * len(kernel_sizes), channels, 1)
        self.norm = nn.InstanceNorm1d(channels // 2, affine=True)
        self.slope = slope

    def pre_activation(self, x):
        """Features after half normalization, before activation and residual."""
        if x.shape[1] != self.channels:
            raise ContractError(f"HNF block expects {self.channels} channels, got {x.shape[1]}")
        y = self.project(torch.cat([conv(x) for conv in self.convs], dim=1))
        first, second = torch.chunk(y, 2, dim=1)
        return torch.cat([self.norm(first), second], dim=1)

    def forward(self, x):
        return x + F.leaky_relu(self.pre_activation(x), self.slope)


class Bridge(nn.Module):
    """FiLM modulation of the main stream by conditioner features and noise scale.

    ``out = scale * main + shift + inject(cond)`` with per-channel ``scale`` and
    ``shift``. Output layers start at zero so a fresh bridge passes ``main``
    through unchanged.
    """

    def __init__(self, channels, embed_dim):
        super().__init__()
        self.channels = channels
        self.from_embed = nn.Linear(embed_dim, 2 * channels)
        self.from_cond = nn.Linear(channels, 2 * channels)
        self.inject_in = nn.Conv1d(channels, channels, 3, padding=1)
        self.inject_out = nn.Conv1d(channels, channels, 1)
        for layer in (self.from_embed, self.from_cond, self.inject_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def film(self, cond, embed):
        """Per-channel ``(scale, shift)``, each shaped ``(batch, channels, 1)``."""
        h = self.from_embed(embed) + self.from_cond(cond.mean(dim=2))
        dscale, shift = torch.chunk(h.unsqueeze(-1), 2, dim=1)
        return 1.0 + dscale, shift

    def forward(self, main, cond, embed):
        if main.shape != cond.shape:
            raise ContractError(f"bridge inputs differ in shape: {tuple(main.shape)} vs {tuple(cond.shape)}")
        scale, shift = self.film(cond, embed)
        inject = self.inject_out(F.silu(self.inject_in(cond)))
        return scale * main + shift + inject


class ScoreNet(nn.Module):
    """Predicts the diffusion noise from ``(x_t, x_tilde, sqrt_alpha_bar)``."""

    def __init__(self, config: ScoreNetConfig):
        super().__init__()
        self.config = config
        c, e = config.base_channels, config.embed_dim
        self.embed = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.main_in = nn.Conv1d(1, c, 3, padding=1)
        self.cond_in = nn.Conv1d(1, c, 3, padding=1)
        self.main_blocks = nn.ModuleList(HNFBlock(c, config.kernel_sizes) for _ in range(config.n_blocks))
        self.cond_blocks = nn.ModuleList(HNFBlock(c, config.kernel_sizes) for _ in range(config.n_blocks))
        self.bridges = nn.ModuleList(Bridge(c, e) for _ in range(config.n_blocks))
        self.out = nn.Conv1d(c, 1, 3, padding=1)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, x_t, x_tilde, sqrt_alpha_bar):
        """``x_t`` and ``x_tilde`` are ``(batch, length)``; the scale is scalar or ``(batch,)``."""
        if x_t.shape != x_tilde.shape:
            raise ContractError(f"x_t {tuple(x_t.shape)} and x_tilde {tuple(x_tilde.shape)} differ")
        squeeze = x_t.dim() == 1
        if squeeze:
            x_t, x_tilde = x_t.unsqueeze(0), x_tilde.unsqueeze(0)
        scale = torch.as_tensor(sqrt_alpha_bar, dtype=x_t.dtype, device=x_t.device)
        scale = scale.expand(x_t.shape[0]) if scale.dim() == 0 else scale.reshape(-1)

        emb = self.embed(noise_scale_embedding(scale, self.config.embed_dim))
        m = self.main_in(x_t.unsqueeze(1))
        c = self.cond_in(x_tilde.unsqueeze(1))
        for main_block, cond_block, bridge in zip(self.main_blocks, self.cond_blocks, self.bridges):
            c = cond_block(c)
            m = bridge(main_block(m), c, emb)
        eps = self.out(F.leaky_relu(m, 0.2)).squeeze(1)
        if not torch.all(torch.isfinite(eps)):
            raise NumericalDivergenceError("score network produced non-finite output")
        return eps.squeeze(0) if squeeze else eps


# ---------------------------------------------------------- checkpoints ----
#
# Layout (little-endian):
#   b"SDCK", u32 version, u32 config byte length, config text (key=value lines),
#   u32 tensor count, then per tensor: u16 name length, name (utf-8),
#   u8 ndim, ndim x u32 dims, prod(dims) x f32 values.


def _format_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _config_text(config: ScoreNetConfig, meta: dict) -> str:
    lines = [f"model.{k}={_format_value(v)}" for k, v in asdict(config).items()]
    lines += [f"meta.{k}={_format_value(v)}" for k, v in sorted(meta.items())]
    return "\n".join(lines)


def _parse_config_text(text):
    fields, meta = {}, {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        (fields if section == "model" else meta)[name] = value
    config = ScoreNetConfig(
        segment_len=int(fields["segment_len"]),
        base_channels=int(fields["base_channels"]),
        n_blocks=int(fields["n_blocks"]),
        kernel_sizes=tuple(int(k) for k in fields["kernel_sizes"].split(",")),
        embed_dim=int(fields["embed_dim"]),
    )
    return config, meta


def save_checkpoint(model: ScoreNet, path, meta: dict | None = None) -> None:
    """Write parameters and config; ``meta`` holds extra string key-values."""
    buf = io.BytesIO()
    text = _config_text(model.config, meta or {}).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, with_meta: bool = False):
    """Return ``(model, config)``, or ``(model, config, meta)`` with ``with_meta``.

    The file is parsed completely before any model is built.
    """
    path = Path(path)
    blob = path.read_bytes()

    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        return struct.unpack_from(fmt, blob, pos), pos + size

    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version, text_len), pos = take("<II", 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    if pos + text_len > len(blob):
        raise CheckpointError(f"{path}: truncated checkpoint")
    config, meta = _parse_config_text(blob[pos : pos + text_len].decode())
    pos += text_len
    (count,), pos = take("<I", pos)
    tensors = {}
    for _ in range(count):
        (name_len,), pos = take("<H", pos)
        if pos + name_len > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (ndim,), pos = take("<B", pos)
        dims, pos = take(f"<{ndim}I", pos)
        n = int(np.prod(dims)) if ndim else 1
        if pos + 4 * n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameters")

    model = ScoreNet(config)
    expected = model.state_dict()
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: parameter names do not match the configured network")
    state = {}
    for name, ref in expected.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        if not np.all(np.isfinite(tensors[name])):
            raise CheckpointError(f"{path}: non-finite values in {name}")
        state[name] = torch.from_numpy(tensors[name])
    model.load_state_dict(state)
    model.eval()
    return (model, config, meta) if with_meta else (model, config)
