"""Static shape stream: convolutional encoder over the long-term event slice,
alignment head, and the feature-alignment loss against frozen teacher features."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from spikegait.errors import DataError, FormatError, InvalidArgument

LUMA = (0.299, 0.587, 0.114)


def grayscale(rgb):
    """BT.601 luma of an (..., 3) or (3, H, W) frame with values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] == 3:
        return LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    if rgb.ndim == 3 and rgb.shape[0] == 3:
        return LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
    raise InvalidArgument(f"expected 3 colour channels, got shape {rgb.shape}")


@dataclass(frozen=True)
class StaticConfig:
    in_channels: int = 16  # 2 * K_static
    widths: tuple = (16, 32, 64)
    embed_dim: int = 64
    teacher_dim: int = 64
    input_size: int = 64
    input_scale: float = 1.0


class StaticEncoder(nn.Module):
    """conv3x3 -> SiLU -> 2x average pool per block, then two heads:
    embedding (global pool + affine) and alignment (1x1 conv + spatial mean)."""

    def __init__(self, cfg: StaticConfig = StaticConfig(), generator=None, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + tuple(cfg.widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, dtype=dtype) for i in range(len(cfg.widths))
        )
        self.align = nn.Conv2d(chans[-1], cfg.teacher_dim, 1, dtype=dtype)
        self.embed = nn.Linear(chans[-1], cfg.embed_dim, dtype=dtype)
        _init_seeded(self, generator)

    def features(self, x):
        for conv in self.convs:
            x = F.avg_pool2d(F.silu(conv(x)), 2)
        return x

    def forward(self, grid, smooth=False):
        """``grid``: (B, 2K, H, W) -> (F_s (B, embed_dim), z_evs (B, teacher_dim))."""
        c = self.cfg
        if grid.dim() != 4 or grid.shape[1] != c.in_channels or grid.shape[2:] != (c.input_size, c.input_size):
            raise InvalidArgument(
                f"expected (B, {c.in_channels}, {c.input_size}, {c.input_size}), got {tuple(grid.shape)}")
        fmap = self.features(grid * c.input_scale)
        f_s = self.embed(fmap.mean(dim=(2, 3)))
        z_evs = self.align(fmap).mean(dim=(2, 3))
        return f_s, z_evs


def _init_seeded(module, generator):
    """Uniform fan-in initialisation drawn from ``generator`` (reproducible)."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                w = torch.rand(m.weight.shape, generator=generator, dtype=torch.float64) * 2 - 1
                m.weight.copy_((w * bound).to(m.weight.dtype))
                if m.bias is not None:
                    m.bias.zero_()


def align_loss(z_evs, z_img):
    """Squared Euclidean distance, summed over the feature axis (per sample)."""
    if z_evs.shape[-1] != z_img.shape[-1]:
        raise InvalidArgument(f"width mismatch {z_evs.shape[-1]} vs {z_img.shape[-1]}")
    return ((z_evs - z_img) ** 2).sum(dim=-1)


def pseudo_teacher(gray, seed, dim=64):
    """Frozen random-projection stand-in for a foundation-model image encoder.

    ``tanh(P @ vec(gray))`` with P a seeded (dim x H*W) Gaussian matrix with
    variance 1/(H*W).
    """
    gray = np.asarray(gray, dtype=np.float64)
    n = gray.size
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((dim, n)) / math.sqrt(n)
    return np.tanh(proj @ gray.reshape(-1))


@dataclass
class TeacherFeatureSet:
    dim: int
    features: dict = field(default_factory=dict)
    teacher: str = "pseudo-teacher"

    def __post_init__(self):
        for sid, v in self.features.items():
            v = np.asarray(v, dtype=np.float32)
            if v.shape != (self.dim,):
                raise DataError(f"feature for sample {sid!r} has width {v.size}, expected {self.dim}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"non-finite teacher feature for sample {sid!r}")
            self.features[sid] = v

    def __getitem__(self, sample_id):
        try:
            return self.features[sample_id]
        except KeyError:
            raise DataError(f"no teacher feature for sample {sample_id!r}") from None

    def __contains__(self, sample_id):
        return sample_id in self.features

    def __len__(self):
        return len(self.features)


TFS_MAGIC = b"TFS1"


def write_teacher_features(fs: TeacherFeatureSet, path):
    with open(path, "wb") as f:
        f.write(TFS_MAGIC + struct.pack("<II", fs.dim, len(fs.features)))
        for sid, v in fs.features.items():
            b = sid.encode("utf-8")
            f.write(struct.pack("<I", len(b)) + b)
            f.write(np.asarray(v, dtype="<f4").tobytes())


def load_teacher_features(path, teacher_name=None) -> TeacherFeatureSet:
    """Read a TFS1 file.

    Records carry no per-record width, so a vector of the wrong width shows up
    as a misparse of whatever follows it; the error names the last sample whose
    record was read, which is the one that disagrees with D_t.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12 or buf[:4] != TFS_MAGIC:
        raise FormatError("not a TFS1 file", offset=0)
    dim, count = struct.unpack_from("<II", buf, 4)
    off = 12
    feats = {}
    prev = None

    def blame(reason):
        if prev is None:
            return FormatError(reason, offset=off)
        return DataError(f"feature for sample {prev!r} does not have width {dim} ({reason})")

    for i in range(count):
        if off + 4 > len(buf):
            raise blame("truncated record header")
        (n,) = struct.unpack_from("<I", buf, off)
        if n == 0 or off + 4 + n > len(buf):
            raise blame("bad sample id length")
        try:
            sid = buf[off + 4:off + 4 + n].decode("utf-8")
        except UnicodeDecodeError:
            raise blame("sample id is not UTF-8") from None
        if off + 4 + n + 4 * dim > len(buf):
            prev = sid
            raise blame("truncated feature vector")
        off += 4 + n
        feats[sid] = np.frombuffer(buf, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        prev = sid
    if off != len(buf):
        raise blame(f"{len(buf) - off} trailing bytes")
    name = teacher_name or os.path.basename(os.fspath(path))
    return TeacherFeatureSet(dim, feats, name)
