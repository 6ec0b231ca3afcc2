"""Training loop: P x K batches, dual-stream forward, CE + triplet + weighted alignment, SGD."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from spikegait.errors import DataError, NumericError
from spikegait.harness.config import RunConfig
from spikegait.harness.data import build_samples
from spikegait.harness.evaluate import EvalResult, evaluate
from spikegait.model import (
    SGD,
    GaitModel,
    LossWeights,
    ModelConfig,
    load_model_blobs,
    model_blobs,
    read_checkpoint,
    write_checkpoint,
)
from spikegait.snn import DynamicConfig
from spikegait.static import StaticConfig, load_teacher_features

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "ce", "tri", "align", "total", "align_raw")


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        n_classes=cfg.n_identities,
        streams=cfg.streams,
        embed_dim=cfg.embed_dim,
        dynamic=DynamicConfig(
            in_channels=2 * cfg.k_dynamic,
            widths=tuple(cfg.dynamic_widths),
            taus=tuple(cfg.expert_taus),
            gate_hidden=cfg.gate_hidden,
            input_pool=cfg.input_pool,
            beta=cfg.surrogate_beta,
            input_scale=cfg.dynamic_input_scale,
            kernel_size=cfg.dynamic_kernel,
        ),
        static=StaticConfig(
            in_channels=2 * cfg.k_static,
            widths=tuple(cfg.static_widths),
            embed_dim=cfg.static_embed_dim,
            teacher_dim=cfg.teacher_dim,
            input_size=cfg.input_size,
            input_scale=cfg.static_input_scale,
        ),
        seed=cfg.seed,
    )


def set_determinism(threads):
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(threads == 1)


class PKSampler:
    """Draws P identities, then K samples of each, without replacement within a batch."""

    def __init__(self, labels, p, k, seed):
        self.labels = np.asarray(labels)
        self.by_id = {int(i): np.nonzero(self.labels == i)[0] for i in np.unique(self.labels)}
        eligible = [i for i, idx in self.by_id.items() if len(idx) >= k]
        if len(eligible) < p:
            raise DataError(f"need {p} identities with at least {k} samples, found {len(eligible)}")
        self.ids = np.array(sorted(eligible))
        self.p, self.k = p, k
        self.rng = np.random.default_rng([seed, 99])

    def __call__(self):
        chosen = self.rng.choice(self.ids, size=self.p, replace=False)
        return np.concatenate([self.rng.choice(self.by_id[int(i)], size=self.k, replace=False) for i in chosen])


@dataclass
class TrainResult:
    model: GaitModel
    log: list = field(default_factory=list)  # rows of LOG_COLUMNS
    metrics: dict = field(default_factory=dict)  # condition name (and "overall") -> EvalResult
    seconds: float = 0.0


def _stack(samples, attr):
    return torch.from_numpy(np.stack([getattr(s, attr) for s in samples]))


def _teacher_targets(cfg, samples):
    if not cfg.teacher_features:
        return _stack(samples, "teacher")
    fs = load_teacher_features(cfg.teacher_features)
    if fs.dim != cfg.teacher_dim:
        raise DataError(f"teacher features have width {fs.dim}, config says teacher_dim = {cfg.teacher_dim}")
    return torch.from_numpy(np.stack([fs[s.sample_id] for s in samples]))


@torch.no_grad()
def embed(model, samples, batch=16):
    model.eval()
    out = []
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        out.append(model(_stack(chunk, "dynamic"), _stack(chunk, "static"))["f_gait"].numpy())
    model.train()
    return np.concatenate(out).astype(np.float64)


def evaluate_model(model, samples, conditions):
    """Per-condition retrieval: the first sequence of every identity is the
    gallery, the remaining sequences of the same condition are probes."""
    emb = embed(model, samples)
    first = {}
    for s in samples:
        first[s.label] = min(first.get(s.label, s.sequence), s.sequence)
    is_gallery = np.array([s.sequence == first[s.label] for s in samples])
    labels = np.array([s.label for s in samples])
    ids = np.array([s.sample_id for s in samples])
    conds = np.array([s.condition for s in samples])
    results = {}
    for c, name in enumerate(conditions):
        g = is_gallery & (conds == c)
        q = ~is_gallery & (conds == c)
        if not q.any():
            continue
        results[name] = evaluate(emb[g], labels[g], emb[q], labels[q], ids[g], ids[q])
    results["overall"] = EvalResult.pooled(list(results.values()))
    return results


def write_log(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def save_checkpoint(path, model, opt, cfg, iteration):
    meta = f"iteration = {iteration}\n" + cfg.to_text()
    write_checkpoint(path, model_blobs(model, opt), meta)


def load_model(path):
    """Rebuild a model from a checkpoint written by :func:`train`. Returns (model, cfg)."""
    from spikegait.harness.config import parse_config_text

    blobs, meta = read_checkpoint(path)
    text = "\n".join(ln for ln in meta.splitlines() if ln.partition("=")[0].strip() != "iteration")
    cfg = parse_config_text(text)
    model = GaitModel(model_config(cfg))
    load_model_blobs(model, blobs)
    model.eval()
    return model, cfg


def train(cfg: RunConfig, out_dir=None, train_samples=None, eval_samples=None, evaluate_after=True):
    """Train a model from ``cfg``; write ``log.csv`` and checkpoints under ``out_dir``.

    Raises NumericError naming the iteration if a loss or gradient is not finite.
    """
    start = time.perf_counter()
    set_determinism(cfg.threads)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write(cfg.to_text())
    if train_samples is None:
        train_samples = build_samples(cfg, "train")
    dyn = _stack(train_samples, "dynamic")
    stat = _stack(train_samples, "static")
    z_img = _teacher_targets(cfg, train_samples)
    labels = torch.tensor([s.label for s in train_samples])

    model = GaitModel(model_config(cfg))
    opt = SGD(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum)
    weights = LossWeights(cfg.lambda_d, cfg.triplet_margin)
    sampler = PKSampler(labels.numpy(), cfg.batch_p, cfg.batch_k, cfg.seed)
    rows = []
    for it in range(1, cfg.iterations + 1):
        if cfg.lr_drop_iter and it == cfg.lr_drop_iter:
            opt.lr = cfg.lr * 0.1
        idx = torch.from_numpy(sampler())
        try:
            out = model(dyn[idx], stat[idx])
            losses = model.losses(out, labels[idx], z_img[idx], weights)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from None
        vals = {k: float(v.detach()) for k, v in losses.items()}
        if not all(math.isfinite(v) for v in vals.values()):
            bad = ", ".join(f"{k}={v}" for k, v in vals.items())
            raise NumericError(f"non-finite loss at iteration {it}: {bad}")
        opt.zero_grad()
        losses["total"].backward()
        try:
            opt.step()
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from None
        if it % cfg.log_every == 0 or it == 1 or it == cfg.iterations:
            rows.append((it, vals["ce"], vals["tri"], weights.lambda_d * vals["align"], vals["total"], vals["align"]))
        if out_dir and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{it:06d}.ckpt"), model, opt, cfg, it)
    result = TrainResult(model, rows)
    if out_dir:
        write_log(os.path.join(out_dir, "log.csv"), rows)
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model, opt, cfg, cfg.iterations)
    if evaluate_after:
        if eval_samples is None:
            eval_samples = build_samples(cfg, "eval")
        result.metrics = evaluate_model(model, eval_samples, cfg.conditions)
        if out_dir:
            write_metrics(os.path.join(out_dir, "metrics.csv"), result.metrics)
    result.seconds = time.perf_counter() - start
    return result


def write_metrics(path, metrics):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("split", "rank1", "map", "minp", "n_probes", "n_excluded"))
        for name, r in metrics.items():
            w.writerow((name, f"{r.rank1:.4f}", f"{r.map:.4f}", f"{r.minp:.4f}", r.n_probes, len(r.excluded)))
