"""Dual-stream gait model: fusion, recognition head, training losses, SGD and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from spikegait.errors import (
    DegenerateBatch,
    DegenerateEmbedding,
    FormatError,
    InvalidArgument,
    NumericError,
)
from spikegait.snn import DynamicConfig, DynamicStream
from spikegait.static import StaticConfig, StaticEncoder, _init_seeded, align_loss

STREAMS = ("dual", "static", "dynamic")


@dataclass
class GaitEmbedding:
    f_gait: np.ndarray
    label: int
    sample_id: str


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 0.2
    triplet_margin: float = 0.2

    def __post_init__(self):
        if self.lambda_d < 0:
            raise InvalidArgument("lambda_d must be >= 0")
        if self.triplet_margin < 0:
            raise InvalidArgument("triplet_margin must be >= 0")


def l2_normalize(z):
    norm = z.norm(dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise DegenerateEmbedding("zero vector before normalisation")
    return z / norm


def fuse(f_s, f_d, weight, bias):
    """Concatenate [F_s; F_d], project affinely and l2-normalise each row."""
    parts = [t for t in (f_s, f_d) if t is not None]
    if not parts:
        raise InvalidArgument("fusion needs at least one stream")
    x = torch.cat(parts, dim=-1)
    if x.shape[-1] != weight.shape[1]:
        raise InvalidArgument(f"fusion expects width {weight.shape[1]}, got {x.shape[-1]}")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite stream feature")
    return l2_normalize(x @ weight.T + bias)


def ce_loss(logits, labels):
    """Mean of -log softmax(logits)[label]; a 1-D logits vector gives a scalar."""
    if logits.dim() == 1:
        return -(logits[labels] - torch.logsumexp(logits, dim=0))
    labels = torch.as_tensor(labels, device=logits.device)
    lse = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return (lse - picked).mean()


def pairwise_distance(a, b=None):
    b = a if b is None else b
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)
    # gradient of sqrt is unbounded at 0 (e.g. duplicated embeddings)
    return torch.sqrt(torch.clamp(d2, min=1e-24))


def triplet_loss(emb, labels, margin=0.2):
    """Batch-hard triplet loss with Euclidean distance.

    For every anchor with at least one positive and one negative in the batch:
    ``relu(max d(a, p) - min d(a, n) + margin)``; the mean over those anchors.
    """
    labels = torch.as_tensor(labels, device=emb.device)
    if labels.unique().numel() < 2:
        raise DegenerateBatch("triplet loss needs at least two identities in the batch")
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=emb.device)
    pos = same & ~eye
    neg = ~same
    valid = pos.any(dim=1) & neg.any(dim=1)
    if not valid.any():
        raise DegenerateBatch("no identity in the batch has two samples")
    d = pairwise_distance(emb)
    hardest_pos = torch.where(pos, d, torch.full_like(d, -torch.inf)).max(dim=1).values
    hardest_neg = torch.where(neg, d, torch.full_like(d, torch.inf)).min(dim=1).values
    per_anchor = torch.relu(hardest_pos - hardest_neg + margin)
    return per_anchor[valid].mean()


def total_loss(ce, tri, align, weights: LossWeights = LossWeights()):
    return ce + tri + weights.lambda_d * align


def sgd_step(params, grads, buffers=None, lr=0.1, weight_decay=5e-4, momentum=0.9):
    """In-place SGD with momentum: ``v <- mu v + g + wd p; p <- p - lr v``.

    ``params``/``grads``/``buffers`` are parallel lists of tensors (``buffers``
    entries may be None before the first step). Returns ``(params, buffers)``.
    Raises NumericError, leaving everything untouched, if any gradient is not
    finite.
    """
    if buffers is None:
        buffers = [None] * len(params)
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i}; step aborted")
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            d = g + weight_decay * p if weight_decay else g.clone()
            if momentum:
                v = buffers[i]
                v = d if v is None else momentum * v + d
                buffers[i] = v
                d = v
            p.sub_(lr * d)
    return params, buffers


class SGD:
    """Stateful wrapper around :func:`sgd_step` for a module's named parameters."""

    def __init__(self, named_params, lr=0.1, weight_decay=5e-4, momentum=0.9):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.buffers = [None] * len(self.named)

    def step(self):
        params = [p for _, p in self.named]
        grads = [p.grad for p in params]
        sgd_step(params, grads, self.buffers, self.lr, self.weight_decay, self.momentum)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def state_blobs(self):
        return {f"optim.momentum.{n}": b for (n, _), b in zip(self.named, self.buffers) if b is not None}

    def load_state_blobs(self, blobs):
        for i, (n, p) in enumerate(self.named):
            key = f"optim.momentum.{n}"
            if key in blobs:
                self.buffers[i] = torch.as_tensor(blobs[key], dtype=p.dtype).reshape(p.shape).clone()


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    streams: str = "dual"
    embed_dim: int = 64
    dynamic: DynamicConfig = field(default_factory=DynamicConfig)
    static: StaticConfig = field(default_factory=StaticConfig)
    seed: int = 0

    def __post_init__(self):
        if self.streams not in STREAMS:
            raise InvalidArgument(f"streams must be one of {STREAMS}, got {self.streams!r}")


class GaitModel(nn.Module):
    """Static encoder + spiking dynamic stream -> fusion -> unit-norm gait embedding,
    plus an affine identity classifier used only for the cross-entropy term."""

    def __init__(self, cfg: ModelConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.static = StaticEncoder(cfg.static, generator=gen, dtype=dtype) if cfg.streams != "dynamic" else None
        self.dynamic = DynamicStream(cfg.dynamic, generator=gen, dtype=dtype) if cfg.streams != "static" else None
        width = (cfg.static.embed_dim if self.static is not None else 0) + (
            self.dynamic.out_features if self.dynamic is not None else 0)
        self.fusion = nn.Linear(width, cfg.embed_dim, dtype=dtype)
        self.classifier = nn.Linear(cfg.embed_dim, cfg.n_classes, dtype=dtype)
        _init_seeded(self.fusion, gen)
        _init_seeded(self.classifier, gen)
        with torch.no_grad():
            # a small non-zero bias keeps the all-zero input away from the degenerate embedding
            self.fusion.bias.copy_((torch.rand(cfg.embed_dim, generator=gen, dtype=torch.float64) * 0.2 - 0.1).to(dtype))

    def forward(self, dyn, stat, smooth=False):
        f_s = z_evs = f_d = None
        if self.static is not None:
            f_s, z_evs = self.static(stat)
        if self.dynamic is not None:
            f_d = self.dynamic(dyn, smooth=smooth)
        f_gait = fuse(f_s, f_d, self.fusion.weight, self.fusion.bias)
        return {
            "f_gait": f_gait,
            "logits": self.classifier(f_gait),
            "z_evs": z_evs,
            "f_s": f_s,
            "f_d": f_d,
        }

    def losses(self, out, labels, z_img, weights: LossWeights):
        ce = ce_loss(out["logits"], labels)
        tri = triplet_loss(out["f_gait"], labels, weights.triplet_margin)
        if out["z_evs"] is not None and z_img is not None:
            al = align_loss(out["z_evs"], z_img).mean()
        else:
            al = torch.zeros((), dtype=ce.dtype)
        return {"ce": ce, "tri": tri, "align": al, "total": total_loss(ce, tri, al, weights)}


# ---------------------------------------------------------------------------
# CKPT1 container

CKPT_MAGIC = b"CKPT1"
META_MAGIC = b"META"


def write_checkpoint(path, blobs: dict, meta: str = ""):
    """magic, u32 count, per blob {u32 name_len, name, u32 rank, u32 dims[rank], f32 data};
    then an optional trailer {"META", u32 len, UTF-8 text}."""
    out = [CKPT_MAGIC, struct.pack("<I", len(blobs))]
    for name, value in blobs.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        b = name.encode("utf-8")
        out.append(struct.pack("<I", len(b)) + b)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    if meta:
        m = meta.encode("utf-8")
        out.append(META_MAGIC + struct.pack("<I", len(m)) + m)
    with open(path, "wb") as f:
        f.write(b"".join(out))


def read_checkpoint(path):
    """Returns ``(blobs: dict[str, np.ndarray], meta: str)``."""
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(CKPT_MAGIC):
        raise FormatError("not a CKPT1 file", offset=0)
    off = len(CKPT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        blobs = {}
        for i in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise FormatError("truncated blob payload", offset=off, record=i)
            blobs[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error:
        raise FormatError("truncated checkpoint", offset=off) from None
    meta = ""
    if off < len(buf):
        if buf[off:off + 4] != META_MAGIC:
            raise FormatError("unexpected trailing bytes", offset=off)
        (n,) = struct.unpack_from("<I", buf, off + 4)
        meta = buf[off + 8:off + 8 + n].decode("utf-8")
    return blobs, meta


def model_blobs(model: nn.Module, optimizer: SGD | None = None):
    blobs = {name: p for name, p in model.named_parameters()}
    if optimizer is not None:
        blobs.update(optimizer.state_blobs())
    return blobs


def load_model_blobs(model: nn.Module, blobs: dict):
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in blobs:
                raise FormatError(f"checkpoint lacks parameter {name!r}")
            src = torch.as_tensor(blobs[name])
            if tuple(src.shape) != tuple(p.shape):
                raise FormatError(f"shape mismatch for {name!r}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
