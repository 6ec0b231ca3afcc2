"""Turn toy sequences (or event files) into model inputs.

events -> two-scale split -> event bounding box crop -> pad-and-resize, plus the
teacher target computed from the synchronized luma frame.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass

import numpy as np

from spikegait.events import (
    EventStream,
    bilinear_resize,
    crop_grid,
    event_bbox,
    pad_and_resize,
    pad_to_square,
    two_scale_split,
)
from spikegait.harness.config import RunConfig
from spikegait.harness.toy import RENDER_VERSION, ToyGaitConfig, generate_toy_dataset
from spikegait.simulator import SimConfig, generate_events
from spikegait.static import grayscale, pseudo_teacher

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    sample_id: str
    label: int
    condition: int
    sequence: int
    dynamic: np.ndarray  # (T, 2K_d, S, S) float32
    static: np.ndarray  # (2K_s, S, S) float32
    teacher: np.ndarray | None = None  # (D_t,) float32
    n_events: int = 0


def sim_config(cfg: RunConfig, condition: int, seed: int) -> SimConfig:
    return SimConfig(
        threshold_c=cfg.threshold_c,
        cutoff_hz=cfg.cutoff_hz[condition],
        noise_rate_hz=cfg.noise_rate_hz[condition],
        refractory_us=cfg.refractory_us,
        interp_factor=cfg.interp_factor,
        log_eps=cfg.log_eps,
        seed=seed,
    )


def stream_inputs(stream: EventStream, cfg: RunConfig):
    """(dynamic (T, 2K_d, S, S), static (2K_s, S, S), bbox) for one event stream."""
    slices = two_scale_split(stream, cfg.num_dynamic_slices, cfg.k_dynamic, cfg.k_static)
    bbox = event_bbox(slices.static_grid.data)
    size = cfg.input_size
    dyn = np.stack([
        pad_and_resize(crop_grid(g, bbox), size).data.reshape(-1, size, size) for g in slices.dynamic
    ])
    stat = pad_and_resize(crop_grid(slices.static_grid, bbox), size).data.reshape(-1, size, size)
    if cfg.input_norm == "rms":
        dyn = dyn / max(np.sqrt(np.mean(dyn ** 2)), 1e-12)
        stat = stat / max(np.sqrt(np.mean(stat ** 2)), 1e-12)
    return dyn.astype(np.float32), stat.astype(np.float32), bbox


def teacher_input(gray, bbox, size):
    """Crop the luma frame with the event bbox and pad-and-resize it like the events."""
    x0, y0, x1, y1 = bbox
    padded, _ = pad_to_square(np.asarray(gray, dtype=np.float64)[y0:y1, x0:x1])
    return bilinear_resize(padded, size, size)


def _sample_seed(cfg, seq):
    return int.from_bytes(hashlib.sha256(f"{cfg.seed}/{seq.sample_id}".encode()).digest()[:8], "little")


def toy_config(cfg: RunConfig, split: str) -> ToyGaitConfig:
    if split == "eval":
        n, first = cfg.sequences_per_identity, 0
    else:
        n, first = cfg.train_sequences_per_identity, 1000
    return ToyGaitConfig(
        n_identities=cfg.n_identities,
        sequences_per_identity=n,
        frames_per_sequence=cfg.frames_per_sequence,
        frame_size=cfg.frame_size,
        frame_interval_us=cfg.frame_interval_us,
        seed=cfg.seed,
        brightness=tuple(cfg.brightness),
        first_sequence=first,
    )


def _cache_key(cfg: RunConfig, split):
    keys = ("seed", "n_identities", "sequences_per_identity", "train_sequences_per_identity",
            "frames_per_sequence", "frame_size", "frame_interval_us", "brightness", "cutoff_hz",
            "noise_rate_hz", "threshold_c", "refractory_us", "interp_factor", "log_eps",
            "num_dynamic_slices", "k_dynamic", "k_static", "input_size", "input_norm", "teacher_seed", "teacher_dim")
    text = f"{split};v{RENDER_VERSION};" + ";".join(f"{k}={getattr(cfg, k)}" for k in keys)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_samples(cfg: RunConfig, split: str, keep_streams=False):
    """Synthesize events for every toy sequence of ``split`` ("train" or "eval").

    Returns a list of :class:`Sample` (and the event streams when requested).
    Results are cached in ``cfg.cache_dir`` when set.
    """
    cache = None
    if cfg.cache_dir and not keep_streams:
        os.makedirs(cfg.cache_dir, exist_ok=True)
        cache = os.path.join(cfg.cache_dir, f"{split}-{_cache_key(cfg, split)}.npz")
        if os.path.exists(cache):
            return _load_cache(cache)
    samples, streams = [], []
    for seq in generate_toy_dataset(toy_config(cfg, split)):
        stream = generate_events(seq.frames, sim_config(cfg, seq.condition, _sample_seed(cfg, seq)))
        dyn, stat, bbox = stream_inputs(stream, cfg)
        gray = teacher_input(grayscale(seq.rgb_middle), bbox, cfg.input_size)
        z = pseudo_teacher(gray, cfg.teacher_seed, cfg.teacher_dim).astype(np.float32)
        samples.append(Sample(seq.sample_id, seq.identity, seq.condition, seq.sequence, dyn, stat, z, len(stream)))
        if keep_streams:
            streams.append(stream)
    logger.info("built %d %s samples", len(samples), split)
    if cache:
        _save_cache(cache, samples)
    return (samples, streams) if keep_streams else samples


def _save_cache(path, samples):
    tmp = path + ".tmp.npz"
    np.savez(
        tmp,
        ids=np.array([s.sample_id for s in samples]),
        labels=np.array([s.label for s in samples]),
        conds=np.array([s.condition for s in samples]),
        seqs=np.array([s.sequence for s in samples]),
        dyn=np.stack([s.dynamic for s in samples]),
        stat=np.stack([s.static for s in samples]),
        teacher=np.stack([s.teacher for s in samples]),
        n_events=np.array([s.n_events for s in samples]),
    )
    os.replace(tmp, path)


def _load_cache(path):
    z = np.load(path)
    return [
        Sample(str(i), int(l), int(c), int(q), d, s, t, int(n))
        for i, l, c, q, d, s, t, n in zip(z["ids"], z["labels"], z["conds"], z["seqs"],
                                          z["dyn"], z["stat"], z["teacher"], z["n_events"])
    ]
