"""Analytic vs finite-difference gradients of a tiny float64 model.

The spiking layers run their smooth forward, so every loss term is
differentiable and the two gradients must agree. Finite differences use the
fourth-order central stencil

    g ~ (-f(p + 2h) + 8 f(p + h) - 8 f(p - h) + f(p - 2h)) / 12h

and errors are reported as ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
exactly-zero gradients (inactive triplet anchors) from turning rounding noise
into a large relative error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from spikegait.harness.config import RunConfig
from spikegait.model import GaitModel, LossWeights, ModelConfig, ce_loss, fuse, triplet_loss
from spikegait.snn import DynamicConfig
from spikegait.static import StaticConfig

logger = logging.getLogger(__name__)

THRESHOLD = 1e-4
STEPS = 4  # time steps of the toy dynamic input
BATCH_P, BATCH_K = 2, 2


@dataclass
class ParamError:
    name: str
    numel: int
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradcheckReport:
    entries: list = field(default_factory=list)
    threshold: float = THRESHOLD

    @property
    def n_params(self):
        return sum(e.numel for e in self.entries)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self):
        return self.max_rel_error <= self.threshold

    def format(self):
        lines = [f"{'parameter':40s} {'numel':>6s} {'max_rel':>11s} {'max_abs':>11s}"]
        for e in self.entries:
            lines.append(f"{e.name:40s} {e.numel:6d} {e.max_rel_error:11.3e} {e.max_abs_error:11.3e}")
        lines.append(f"parameters: {self.n_params}  max relative error: {self.max_rel_error:.3e}  "
                     f"threshold: {self.threshold:.0e}  {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def check_gradients(loss_fn, named_params, h=1e-5, floor=1e-5, threshold=THRESHOLD) -> GradcheckReport:
    """Compare autograd gradients of ``loss_fn()`` with finite differences for every element."""
    named_params = list(named_params)
    report = GradcheckReport(threshold=threshold)
    if not named_params:
        return report
    params = [p for _, p in named_params]
    for p in params:
        p.grad = None
    loss_fn().backward()
    with torch.no_grad():
        for name, p in named_params:
            analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.empty_like(p)
            flat = p.view(-1)
            nflat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                f = []
                for step in (2, 1, -1, -2):
                    flat[i] = orig + step * h
                    f.append(float(loss_fn()))
                flat[i] = orig
                nflat[i] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h)
            abs_err = (analytic - numeric).abs()
            denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=p.dtype))
            rel = abs_err / denom
            report.entries.append(ParamError(name, p.numel(), float(rel.max()), float(abs_err.max())))
    return report


def toy_model_config(cfg: RunConfig, streams="dual") -> ModelConfig:
    """A dual-stream model well under 2k parameters on ``gradcheck_size`` inputs."""
    s = cfg.gradcheck_size
    n_blocks = max(1, int(np.log2(s)) - 1)
    return ModelConfig(
        n_classes=BATCH_P,
        streams=streams,
        embed_dim=4,
        dynamic=DynamicConfig(in_channels=2, widths=(3, 3), taus=tuple(cfg.expert_taus), gate_hidden=2,
                              input_pool=1, mid_pool=2 if s % 2 == 0 else 1, beta=cfg.surrogate_beta),
        static=StaticConfig(in_channels=2, widths=(3,) * n_blocks, embed_dim=4, teacher_dim=3, input_size=s),
        seed=cfg.seed,
    )


def _toy_batch(cfg: RunConfig, mcfg: ModelConfig):
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    b, s = BATCH_P * BATCH_K, cfg.gradcheck_size
    dyn = torch.rand(b, STEPS, 2, s, s, generator=gen, dtype=torch.float64) * 2.0
    stat = torch.rand(b, 2, s, s, generator=gen, dtype=torch.float64) * 2.0
    z = torch.rand(b, mcfg.static.teacher_dim, generator=gen, dtype=torch.float64) - 0.5
    labels = torch.arange(BATCH_P).repeat_interleave(BATCH_K)
    return dyn, stat, z, labels


def gradcheck(cfg: RunConfig, kind="full") -> GradcheckReport:
    """``kind``: "full" (dual stream), "static", "dynamic", "affine" (fusion and
    classifier on fixed stream features) or "empty" (no parameters)."""
    torch.manual_seed(cfg.seed)
    weights = LossWeights(cfg.lambda_d, cfg.triplet_margin)
    if kind == "empty":
        return check_gradients(lambda: torch.zeros((), dtype=torch.float64), [])
    mcfg = toy_model_config(cfg, "dual" if kind in ("full", "affine") else kind)
    dyn, stat, z, labels = _toy_batch(cfg, mcfg)
    model = GaitModel(mcfg, dtype=torch.float64)
    if kind == "affine":
        gen = torch.Generator().manual_seed(cfg.seed + 2)
        width = model.fusion.weight.shape[1]
        feats = torch.randn(len(labels), width, generator=gen, dtype=torch.float64)
        named = [(f"fusion.{n}", p) for n, p in model.fusion.named_parameters()]
        named += [(f"classifier.{n}", p) for n, p in model.classifier.named_parameters()]

        def loss_fn():
            emb = fuse(feats, None, model.fusion.weight, model.fusion.bias)
            return ce_loss(model.classifier(emb), labels) + triplet_loss(emb, labels, weights.triplet_margin)

        return check_gradients(loss_fn, named)

    def loss_fn():
        out = model(dyn, stat, smooth=True)
        return model.losses(out, labels, z, weights)["total"]

    report = check_gradients(loss_fn, list(model.named_parameters()))
    logger.info("gradcheck %s: %d parameters, max relative error %.3e", kind, report.n_params, report.max_rel_error)
    return report
