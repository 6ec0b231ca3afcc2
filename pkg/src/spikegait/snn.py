"""Leaky integrate-and-fire layers, the spiking gate and the mixture of spiking experts.

Time runs along the first tensor axis: sequences are shaped ``(T, B, C, ...)``
with one time step per dynamic slice. Spikes use a hard Heaviside forward and a
fast-sigmoid surrogate derivative ``beta / (2 (1 + beta |x|)^2)`` backward.
With ``smooth=True`` the Heaviside is replaced by the integral of that
surrogate, so the forward pass is differentiable and finite differences of it
agree with the analytic gradient (used only for gradient checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from spikegait.errors import InvalidArgument, NumericError, StateError


@dataclass(frozen=True)
class LifParams:
    tau: float
    R: float = 1.0
    u_th: float = 1.0
    u_reset: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        if not self.tau > self.dt / 2:
            raise InvalidArgument(f"tau={self.tau} must exceed dt/2 for a stable explicit update")
        if not self.u_th > self.u_reset:
            raise InvalidArgument("u_th must be greater than u_reset")


@dataclass(frozen=True)
class SurrogateConfig:
    kind: str = "fast-sigmoid"
    beta: float = 4.0

    def __post_init__(self):
        if self.kind != "fast-sigmoid":
            raise InvalidArgument(f"unsupported surrogate {self.kind!r}")
        if not self.beta > 0:
            raise InvalidArgument("beta must be positive")


def surrogate_grad(x, beta):
    return beta / (2.0 * (1.0 + beta * x.abs()) ** 2)


def smooth_step(x, beta):
    """Antiderivative of the surrogate, shifted to run from 0 to 1."""
    return 0.5 + 0.5 * beta * x / (1.0 + beta * x.abs())


class _SpikeFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, beta):
        ctx.save_for_backward(x)
        ctx.beta = beta
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * surrogate_grad(x, ctx.beta), None


def spike(x, surrogate=SurrogateConfig(), smooth=False):
    if smooth:
        return smooth_step(x, surrogate.beta)
    return _SpikeFn.apply(x, surrogate.beta)


def lif_step(u, current, params: LifParams, surrogate=SurrogateConfig(), smooth=False):
    """One explicit-Euler LIF update followed by threshold and hard reset.

    Returns ``(u_next, spikes)``. The reset is detached from the graph in the
    hard-threshold forward.
    """
    if not torch.isfinite(current).all():
        raise NumericError("non-finite input current")
    u = u + (params.dt / params.tau) * (params.R * current - u)
    s = spike(u - params.u_th, surrogate, smooth)
    r = s if smooth else s.detach()
    u = u * (1.0 - r) + params.u_reset * r
    return u, s


def synaptic_current(spikes, weights, prev=None, decay=None):
    """``I = W . S`` over the channel axis (axis 1 for batched input).

    With ``decay`` set, the exponential kernel ``I_t = decay * I_{t-1} + W . S_t``
    is used instead of the impulse kernel.
    """
    if spikes.dim() == 1:
        current = weights @ spikes
    else:
        current = torch.einsum("oi,bi...->bo...", weights, spikes)
    if decay is not None and prev is not None:
        current = decay * prev + current
    return current


class SpikingLayer(nn.Module):
    """Dense synapses feeding LIF neurons, applied per spatial site.

    With ``kernel_size`` k > 1 each site sees its k x k neighbourhood (zero
    padded): the weight is an (out x in*k*k) matrix over the flattened patch,
    i.e. a convolution.
    """

    def __init__(self, in_features, out_features, params: LifParams,
                 surrogate=SurrogateConfig(), syn_decay=None, init_gain=1.0, generator=None,
                 dtype=torch.float32, kernel_size=1):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise InvalidArgument("kernel_size must be a positive odd integer")
        self.in_features = in_features
        self.out_features = out_features
        self.kernel_size = kernel_size
        self.params = params
        self.surrogate = surrogate
        self.syn_decay = syn_decay
        fan_in = in_features * kernel_size * kernel_size
        bound = init_gain * math.sqrt(3.0 / fan_in)
        w = (torch.rand(out_features, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
        self.weight = nn.Parameter(w.to(dtype))

    def _current(self, spikes, prev):
        if self.kernel_size == 1 or spikes.dim() != 4:
            return synaptic_current(spikes, self.weight, prev, self.syn_decay)
        k = self.kernel_size
        kernel = self.weight.reshape(self.out_features, self.in_features, k, k)
        current = F.conv2d(spikes, kernel, padding=k // 2)
        if self.syn_decay is not None and prev is not None:
            current = self.syn_decay * prev + current
        return current

    def forward(self, seq, smooth=False, record=None):
        if seq.shape[2] != self.in_features:
            raise InvalidArgument(f"expected {self.in_features} input channels, got {seq.shape[2]}")
        T = seq.shape[0]
        out_shape = (seq.shape[1], self.out_features) + tuple(seq.shape[3:])
        u = torch.full(out_shape, self.params.u_reset, dtype=seq.dtype, device=seq.device)
        current = None
        spikes = []
        for t in range(T):
            current = self._current(seq[t], current)
            u, s = lif_step(u, current, self.params, self.surrogate, smooth)
            spikes.append(s)
            if record is not None:
                record.append(u.detach())
        return torch.stack(spikes)


def geometric_mean(values):
    return math.exp(sum(math.log(v) for v in values) / len(values))


def expert_params(tau, u_th=1.0, u_reset=0.0):
    # R = tau: each input spike moves the membrane by the same amount for every
    # expert, so tau only sets how long input is integrated.
    return LifParams(tau=tau, R=tau, u_th=u_th, u_reset=u_reset)


class SpikingGate(nn.Module):
    """Spatial mean -> spiking layer -> temporal rate -> affine -> softmax."""

    def __init__(self, in_features, n_experts, hidden=8, tau=8.0, surrogate=SurrogateConfig(),
                 generator=None, dtype=torch.float32, init_gain=1.0):
        super().__init__()
        self.layer = SpikingLayer(in_features, hidden, expert_params(tau), surrogate,
                                  init_gain=init_gain, generator=generator, dtype=dtype)
        self.affine = nn.Linear(hidden, n_experts, dtype=dtype)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(hidden)
            w = (torch.rand(n_experts, hidden, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            self.affine.weight.copy_(w.to(dtype))
            self.affine.bias.zero_()

    def forward(self, seq, smooth=False):
        pooled = seq.flatten(3).mean(dim=3) if seq.dim() > 3 else seq
        rates = self.layer(pooled, smooth=smooth).mean(dim=0)
        logits = self.affine(rates)
        return torch.softmax(logits, dim=-1)


class MoseLayer(nn.Module):
    """N spiking experts with distinct membrane constants mixed by a spiking gate.

    The mixture is taken per time step, ``out_t = sum_i alpha_i S_i(t)``; the
    coefficients are fixed over the sequence, so the time average of the output
    equals the alpha-weighted mix of each expert's firing rate.
    """

    def __init__(self, in_features, out_features, taus=(2.0, 8.0, 32.0), gate_hidden=8,
                 surrogate=SurrogateConfig(), init_gain=1.0, generator=None, dtype=torch.float32,
                 distinct_taus=True, kernel_size=1):
        super().__init__()
        if distinct_taus and len(set(taus)) != len(taus):
            raise InvalidArgument("expert time constants must be distinct")
        self.taus = tuple(float(t) for t in taus)
        self.experts = nn.ModuleList(
            SpikingLayer(in_features, out_features, expert_params(t), surrogate,
                         init_gain=init_gain, generator=generator, dtype=dtype, kernel_size=kernel_size)
            for t in self.taus
        )
        self.gate = SpikingGate(in_features, len(self.taus), gate_hidden, geometric_mean(self.taus),
                                surrogate, generator=generator, dtype=dtype, init_gain=init_gain)

    @property
    def n_experts(self):
        return len(self.experts)

    def expert_outputs(self, seq, smooth=False):
        return [e(seq, smooth=smooth) for e in self.experts]

    def forward(self, seq, smooth=False, alpha=None):
        """Returns ``(mixed spike sequence, alpha)``; ``alpha`` may be pinned, shape (B, N)."""
        if alpha is None:
            alpha = self.gate(seq, smooth=smooth)
        outs = self.expert_outputs(seq, smooth)
        extra = (1,) * (outs[0].dim() - 2)
        mixed = alpha[:, 0].reshape(1, -1, *extra) * outs[0]
        for i in range(1, len(outs)):
            mixed = mixed + alpha[:, i].reshape(1, -1, *extra) * outs[i]
        return mixed, alpha


def mose_forward(layer: MoseLayer, seq, smooth=False, alpha=None):
    """Time-averaged mixture feature of one MoSE layer."""
    mixed, _ = layer(seq, smooth=smooth, alpha=alpha)
    return mixed.mean(dim=0)


@dataclass(frozen=True)
class DynamicConfig:
    in_channels: int = 8  # 2 * K_dynamic
    widths: tuple = (16, 32)
    taus: tuple = (2.0, 8.0, 32.0)
    gate_hidden: int = 8
    input_pool: int = 4
    mid_pool: int = 2
    beta: float = 4.0
    input_scale: float = 1.0
    init_gain: float = 1.0
    kernel_size: int = 1  # receptive field of the expert synapses


class DynamicStream(nn.Module):
    """Two MoSE layers with spatial average pooling between them; output is the
    time- and space-averaged spike rate of the last layer."""

    def __init__(self, cfg: DynamicConfig = DynamicConfig(), generator=None, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        sur = SurrogateConfig(beta=cfg.beta)
        chans = (cfg.in_channels,) + tuple(cfg.widths)
        self.layers = nn.ModuleList(
            MoseLayer(chans[i], chans[i + 1], cfg.taus, cfg.gate_hidden, sur,
                      init_gain=cfg.init_gain, generator=generator, dtype=dtype, kernel_size=cfg.kernel_size)
            for i in range(len(cfg.widths))
        )
        self.last_alphas = []

    @property
    def out_features(self):
        return self.cfg.widths[-1]

    @staticmethod
    def _pool(seq, k):
        if k <= 1:
            return seq
        T, B = seq.shape[:2]
        flat = seq.reshape(T * B, *seq.shape[2:])
        flat = F.avg_pool2d(flat, k)
        return flat.reshape(T, B, *flat.shape[1:])

    def forward(self, slices, smooth=False, alphas=None):
        """``slices``: (B, T, C, H, W) dynamic voxel slices -> (B, width) feature."""
        if slices.dim() != 5 or slices.shape[2] != self.cfg.in_channels:
            raise InvalidArgument(
                f"expected (B, T, {self.cfg.in_channels}, H, W) slices, got {tuple(slices.shape)}")
        seq = slices.transpose(0, 1) * self.cfg.input_scale
        seq = self._pool(seq, self.cfg.input_pool)
        used = []
        for i, layer in enumerate(self.layers):
            if i > 0:
                seq = self._pool(seq, self.cfg.mid_pool)
            seq, a = layer(seq, smooth=smooth, alpha=None if alphas is None else alphas[i])
            used.append(a.detach())
        self.last_alphas = used
        return seq.mean(dim=0).flatten(2).mean(dim=2)


# ---------------------------------------------------------------------------
# recorded forward / backward through time


@dataclass
class ForwardRecord:
    """A forward pass kept alive for one backward pass."""

    output: torch.Tensor
    inputs: list
    params: list = field(default_factory=list)
    consumed: bool = False


def record_forward(module: nn.Module, *inputs, smooth=False, **kwargs) -> ForwardRecord:
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    with torch.enable_grad():
        out = module(*leaves, smooth=smooth, **kwargs)
    if isinstance(out, tuple):
        out = out[0]
    return ForwardRecord(out, leaves, list(module.named_parameters()))


def _bptt(record, upstream):
    if record is None or not isinstance(record, ForwardRecord):
        raise StateError("backward called without a recorded forward pass")
    if record.consumed:
        raise StateError("forward record already consumed by a backward pass")
    if record.output.grad_fn is None:
        raise StateError("forward record carries no graph")
    targets = record.inputs + [p for _, p in record.params]
    grads = torch.autograd.grad(record.output, targets, upstream, allow_unused=True)
    record.consumed = True
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    n = len(record.inputs)
    return {
        "inputs": grads[:n],
        "params": {name: g for (name, _), g in zip(record.params, grads[n:])},
    }


def lif_backward(record: ForwardRecord, upstream):
    """Gradients of a recorded spiking-layer forward w.r.t. inputs and weights."""
    return _bptt(record, upstream)


def mose_backward(record: ForwardRecord, upstream):
    """Gradients of a recorded MoSE / dynamic-stream forward, gate included."""
    return _bptt(record, upstream)
