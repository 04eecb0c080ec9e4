"""Generator and discriminator networks plus the checkpoint container format.

The generator maps a noisy feature matrix to a clean prediction, conditioned
on a latent vector (through scale/shift modulation of group normalization)
and the diffusion step (through a sinusoidal embedding added inside the 1-D
residual blocks). Layout follows the 2D-1D-2D convolutional pattern common in
feature-sequence conversion: 2-D convolutions for down/upsampling, 1-D
convolutions along time in between.

The discriminator consumes an (x_{t-1}, x_t) pair as a 2-channel stack and
emits a patch grid of probabilities; the step t enters as a channel bias
after the stem.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class GeneratorSpec:
    feature_dim: int = 35
    base_channels: int = 8
    n_resblocks: int = 2
    latent_dim: int = 16
    time_embed_dim: int = 32
    downsample_factor: int = 4

    def validate(self) -> None:
        for name in ("feature_dim", "base_channels", "n_resblocks", "latent_dim", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.downsample_factor not in (1, 2, 4):
            raise ValueError("downsample_factor must be 1, 2 or 4")


@dataclass(frozen=True)
class DiscriminatorSpec:
    feature_dim: int = 35
    base_channels: int = 8
    n_layers: int = 3
    time_embed_dim: int = 32

    def validate(self) -> None:
        for name in ("feature_dim", "base_channels", "n_layers", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# Desk-scale presets; "tiny" is the test default, "paper_shaped" is merely a
# larger configuration in the same family, not a replication of any
# particular published channel plan.
PRESETS: dict[str, tuple[GeneratorSpec, DiscriminatorSpec]] = {
    "tiny": (GeneratorSpec(), DiscriminatorSpec()),
    "small": (
        GeneratorSpec(base_channels=16, n_resblocks=4, latent_dim=32, time_embed_dim=64),
        DiscriminatorSpec(base_channels=16, n_layers=3, time_embed_dim=64),
    ),
    "paper_shaped": (
        GeneratorSpec(base_channels=32, n_resblocks=6, latent_dim=64, time_embed_dim=128),
        DiscriminatorSpec(base_channels=32, n_layers=4, time_embed_dim=128),
    ),
}


def sinusoidal_time_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sin/cos embedding of a diffusion step, shape (dim,)."""
    half = dim // 2
    if half < 1:
        return torch.full((dim,), float(t), dtype=dtype)
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=emb.dtype)])
    return emb.to(dtype)


def _num_groups(channels: int) -> int:
    return math.gcd(channels, 8)


class AdaptiveGroupNorm(nn.Module):
    """Group normalization whose scale and shift come from a conditioning
    vector: out = (1 + scale(c)) * norm(x) + shift(c)."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels, affine=False)
        self.proj = nn.Linear(cond_dim, 2 * channels)
        self.channels = channels

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        scale, shift = self.proj(cond).split(self.channels, dim=-1)
        shape = (x.shape[0], self.channels) + (1,) * (x.dim() - 2)
        return (1.0 + scale.view(shape)) * self.norm(x) + shift.view(shape)


class _ResBlock1d(nn.Module):
    """Time-axis residual block with latent-modulated norms and a step bias."""

    def __init__(self, channels: int, cond_dim: int, t_dim: int):
        super().__init__()
        self.norm1 = AdaptiveGroupNorm(channels, cond_dim)
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, channels)
        self.norm2 = AdaptiveGroupNorm(channels, cond_dim)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, x, cond, t_feat):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x, cond)))
        h = h + self.t_proj(t_feat).unsqueeze(-1)
        h = self.conv2(torch.nn.functional.silu(self.norm2(h, cond)))
        return x + h


class Generator(nn.Module):
    """Clean-feature predictor G(x_t, z, t) with matching input/output shape.

    Accepts (Q, T) or (B, Q, T) inputs; T must be divisible by the spec's
    downsample_factor. The feature axis is zero-padded up to a multiple of
    the factor internally and cropped on the way out.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        c = spec.base_channels
        f = spec.downsample_factor
        self.n_stages = int(round(math.log2(f)))
        q = spec.feature_dim
        self.q_pad = math.ceil(q / f) * f

        cond_dim = 2 * spec.latent_dim
        self.z_trunk = nn.Sequential(nn.Linear(spec.latent_dim, cond_dim), nn.SiLU())
        t_dim = spec.time_embed_dim
        self.t_trunk = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU())

        self.stem = nn.Conv2d(1, c, 3, padding=1)
        self.stem_norm = AdaptiveGroupNorm(c, cond_dim)
        self.downs = nn.ModuleList()
        self.down_norms = nn.ModuleList()
        ch = c
        for _ in range(self.n_stages):
            self.downs.append(nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1))
            self.down_norms.append(AdaptiveGroupNorm(2 * ch, cond_dim))
            ch *= 2

        c1d = ch * (self.q_pad // f)
        hidden = 4 * c
        self.to_1d = nn.Conv1d(c1d, hidden, 1)
        self.resblocks = nn.ModuleList(
            _ResBlock1d(hidden, cond_dim, t_dim) for _ in range(spec.n_resblocks)
        )
        self.from_1d = nn.Conv1d(hidden, c1d, 1)

        self.ups = nn.ModuleList()
        self.up_norms = nn.ModuleList()
        for _ in range(self.n_stages):
            self.ups.append(nn.Conv2d(ch, ch // 2, 3, padding=1))
            self.up_norms.append(AdaptiveGroupNorm(ch // 2, cond_dim))
            ch //= 2
        self.head = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, z: torch.Tensor, t: int) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if z.dim() == 1:
            z = z.unsqueeze(0).expand(x.shape[0], -1)
        if x.dim() != 3:
            raise ValueError(f"expected (Q, T) or (B, Q, T) input, got {tuple(x.shape)}")
        b, q, n = x.shape
        if q != self.spec.feature_dim:
            raise ValueError(f"feature dim {q} != spec {self.spec.feature_dim}")
        f = self.spec.downsample_factor
        if n % f:
            raise ValueError(f"sequence length {n} not divisible by {f}")
        if z.shape != (b, self.spec.latent_dim):
            raise ValueError(f"latent must be ({b}, {self.spec.latent_dim}), got {tuple(z.shape)}")

        cond = self.z_trunk(z)
        t_emb = sinusoidal_time_embedding(t, self.spec.time_embed_dim, dtype=x.dtype)
        t_feat = self.t_trunk(t_emb.unsqueeze(0)).expand(b, -1)

        h = x.unsqueeze(1)
        if self.q_pad != q:
            h = torch.nn.functional.pad(h, (0, 0, 0, self.q_pad - q))
        h = torch.nn.functional.silu(self.stem_norm(self.stem(h), cond))
        for conv, norm in zip(self.downs, self.down_norms):
            h = torch.nn.functional.silu(norm(conv(h), cond))

        bb, ch, qq, tt = h.shape
        h = h.reshape(bb, ch * qq, tt)
        h = self.to_1d(h)
        for block in self.resblocks:
            h = block(h, cond, t_feat)
        h = self.from_1d(h)
        h = h.reshape(bb, ch, qq, tt)

        for conv, norm in zip(self.ups, self.up_norms):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.nn.functional.silu(norm(conv(h), cond))
        out = self.head(h).squeeze(1)[:, :q, :]
        return out.squeeze(0) if squeeze else out


class PatchDiscriminator(nn.Module):
    """Patch-wise real/fake classifier D(x_{t-1}, x_t, t).

    The pair is stacked as two channels; n_layers stride-2 4x4 convolutions
    build local receptive fields (see receptive_field()), and the final 3x3
    convolution emits one probability per patch via a sigmoid.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        c = spec.base_channels
        t_dim = spec.time_embed_dim
        self.t_trunk = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU())
        self.t_proj = nn.Linear(t_dim, c)
        self.stem = nn.Conv2d(2, c, 4, stride=2, padding=1)
        self.layers = nn.ModuleList()
        self.norms = nn.ModuleList()
        ch = c
        for _ in range(spec.n_layers - 1):
            self.layers.append(nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1))
            self.norms.append(nn.GroupNorm(_num_groups(2 * ch), 2 * ch))
            ch *= 2
        self.head = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, x_prev: torch.Tensor, x_t: torch.Tensor, t: int) -> torch.Tensor:
        if x_prev.shape != x_t.shape:
            raise ValueError(
                f"pair shapes differ: {tuple(x_prev.shape)} vs {tuple(x_t.shape)}"
            )
        squeeze = x_prev.dim() == 2
        if squeeze:
            x_prev, x_t = x_prev.unsqueeze(0), x_t.unsqueeze(0)
        if x_prev.shape[1] != self.spec.feature_dim:
            raise ValueError(
                f"feature dim {x_prev.shape[1]} != spec {self.spec.feature_dim}"
            )
        h = torch.stack([x_prev, x_t], dim=1)
        t_emb = sinusoidal_time_embedding(t, self.spec.time_embed_dim, dtype=h.dtype)
        t_feat = self.t_proj(self.t_trunk(t_emb.unsqueeze(0)))
        h = self.stem(h) + t_feat.view(1, -1, 1, 1)
        h = torch.nn.functional.leaky_relu(h, 0.2)
        for conv, norm in zip(self.layers, self.norms):
            h = torch.nn.functional.leaky_relu(norm(conv(h)), 0.2)
        out = torch.sigmoid(self.head(h)).squeeze(1)
        return out.squeeze(0) if squeeze else out


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Input extent (frames/dims, square) seen by one output patch."""
    rf, stride = 1, 1
    for _ in range(spec.n_layers):
        rf += 3 * stride  # 4x4 kernel, stride 2
        stride *= 2
    return rf + 2 * stride  # final 3x3, stride 1


def build_generator(spec: GeneratorSpec, seed: int | None = None) -> Generator:
    """Construct a generator; a seed makes the random initialization
    reproducible without disturbing the global torch RNG."""
    if seed is None:
        return Generator(spec)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Generator(spec)


def build_discriminator(spec: DiscriminatorSpec, seed: int | None = None) -> PatchDiscriminator:
    if seed is None:
        return PatchDiscriminator(spec)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return PatchDiscriminator(spec)


def param_count(spec: GeneratorSpec | DiscriminatorSpec) -> int:
    """Total trainable parameter count implied by a spec."""
    if isinstance(spec, GeneratorSpec):
        module = build_generator(spec, seed=0)
    elif isinstance(spec, DiscriminatorSpec):
        module = build_discriminator(spec, seed=0)
    else:
        raise TypeError(f"not a net spec: {type(spec).__name__}")
    return sum(p.numel() for p in module.parameters())


def named_params(module: nn.Module) -> dict[str, torch.Tensor]:
    """Flat name -> tensor view of a module's parameters."""
    return dict(module.named_parameters())


# ---------------------------------------------------------------------------
# Checkpoint container: JSON manifest + named little-endian arrays
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DGVCCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointFormatError(Exception):
    """Checkpoint file cannot be parsed."""


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays (float32 or uint8, little-endian) plus a JSON
    manifest carrying format version, precision tag and caller metadata."""
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            arr = arr.astype("<f4", copy=False)
        elif arr.dtype == np.uint8:
            pass
        else:
            raise ValueError(f"array {name!r} must be float32 or uint8, got {arr.dtype}")
        entries.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[np.dtype(arr.dtype.str.replace('>', '<'))],
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes(order="C")
    manifest = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "precision": "float32",
            "meta": meta,
            "arrays": entries,
        }
    ).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<IQ", CHECKPOINT_VERSION, len(manifest))
    blob += manifest
    blob += payload
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of write_checkpoint; round-trips bit-exactly."""
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    if len(data) < head:
        raise CheckpointFormatError(f"{path}: shorter than the fixed header")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    version, manifest_len = struct.unpack_from("<IQ", data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    if len(data) < head + manifest_len:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[head : head + manifest_len])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: corrupt manifest: {exc}") from exc
    payload = data[head + manifest_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointFormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointFormatError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(payload[lo:hi], dtype=dtype).reshape(entry["shape"]).copy()
        )
    return arrays, manifest["meta"]


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Parameters as float32 numpy arrays keyed '<prefix>.<param name>'."""
    return {
        f"{prefix}.{name}": p.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, p in module.named_parameters()
    }


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    """Load parameters saved by module_arrays back into a module."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise KeyError(f"checkpoint missing array {key!r}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(
                    f"array {key!r} shape {arr.shape} != parameter shape {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
