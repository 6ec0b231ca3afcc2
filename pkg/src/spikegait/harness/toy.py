"""Procedural walking-figure sequences standing in for a gait dataset.

An identity is a gait: leg swing frequency, arm-to-leg phase offset, stride
amplitude and body width. Body proportions are shared by everyone. Each
sequence adds nuisance: start position, walking speed, start time within the
gait cycle, small jitter of frequency, amplitude and proportions, and clothing
colour. Frames are rendered in RGB with anti-aliased capsules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spikegait.simulator import FrameSequence
from spikegait.static import grayscale


@dataclass(frozen=True)
class IdentityLatent:
    freq_hz: float  # leg swing frequency
    phase: float  # arm swing phase relative to the legs, radians
    amplitude: float  # leg swing, radians
    body_width: float  # torso diameter, px


# shared body proportions in px, jittered per sequence
TORSO_LEN, LEG_LEN, HEAD_R = 16.0, 17.0, 3.2


@dataclass(frozen=True)
class ToyGaitConfig:
    n_identities: int = 8
    sequences_per_identity: int = 6
    frames_per_sequence: int = 32
    frame_size: int = 64
    frame_interval_us: int = 40000
    seed: int = 0
    brightness: tuple = (1.0,)
    walk_speed: tuple = (2.0, 5.0)  # px/s range
    first_sequence: int = 0
    latents: tuple | None = None  # explicit IdentityLatent per identity

    def __post_init__(self):
        if self.n_identities < 2:
            raise ValueError("n_identities must be >= 2")
        if self.frames_per_sequence < 8:
            raise ValueError("frames_per_sequence must be >= 8")


@dataclass
class ToySequence:
    identity: int
    sequence: int
    condition: int
    brightness: float
    frames: FrameSequence
    rgb_middle: np.ndarray = field(repr=False, default=None)

    @property
    def sample_id(self):
        return f"id{self.identity:03d}_seq{self.sequence:04d}_c{self.condition}"


def identity_latents(n, seed):
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 7, i])
        out.append(IdentityLatent(
            freq_hz=rng.uniform(0.8, 2.4),
            phase=rng.uniform(0, 2 * np.pi),
            amplitude=rng.uniform(0.25, 0.6),
            body_width=rng.uniform(5.0, 9.0),
        ))
    return tuple(out)


def _capsule_cov(px, py, ax, ay, bx, by, r):
    """Anti-aliased coverage of a capsule (segment a-b with radius r)."""
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    h = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
    d = np.hypot(px - ax - h * dx, py - ay - h * dy) - r
    return np.clip(0.5 - d, 0.0, 1.0)


# bump when rendering changes so cached voxel grids are rebuilt
RENDER_VERSION = 2

BACKGROUND = np.array([0.10, 0.10, 0.12])


def render_frame(lat: IdentityLatent, t, cx, size, colors, freq, amp, body=(TORSO_LEN, LEG_LEN, HEAD_R)):
    """RGB frame (size, size, 3) of the figure at time ``t`` seconds, hip at x=cx."""
    torso_len, leg_len, head_r = body
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    total = 2 * head_r + torso_len + leg_len
    top = (size - total) / 2.0
    head_y = top + head_r
    neck_y = top + 2 * head_r + lat.body_width / 2
    hip_y = top + 2 * head_r + torso_len
    wt = 2 * np.pi * freq * t
    swing = amp * np.sin(wt)
    arm = 0.6 * amp * np.sin(wt + lat.phase)
    arm_len = 0.7 * leg_len
    img = np.broadcast_to(BACKGROUND, (size, size, 3)).copy()

    def paint(cov, color):
        nonlocal img
        img = img * (1 - cov[..., None]) + cov[..., None] * np.asarray(color)

    # far limbs first, near limbs over them
    far_leg = (cx + leg_len * np.sin(-swing), hip_y + leg_len * np.cos(swing))
    paint(_capsule_cov(xx, yy, cx, hip_y, *far_leg, 1.6), colors["pants"] * 0.7)
    far_arm = (cx + arm_len * np.sin(arm), neck_y + arm_len * np.cos(arm))
    paint(_capsule_cov(xx, yy, cx, neck_y, *far_arm, 1.2), colors["shirt"] * 0.7)
    paint(_capsule_cov(xx, yy, cx, neck_y, cx, hip_y, lat.body_width / 2), colors["shirt"])
    paint(_capsule_cov(xx, yy, cx, head_y, cx, head_y, head_r), colors["skin"])
    near_leg = (cx + leg_len * np.sin(swing), hip_y + leg_len * np.cos(swing))
    paint(_capsule_cov(xx, yy, cx, hip_y, *near_leg, 1.6), colors["pants"])
    near_arm = (cx + arm_len * np.sin(-arm), neck_y + arm_len * np.cos(arm))
    paint(_capsule_cov(xx, yy, cx, neck_y, *near_arm, 1.2), colors["shirt"])
    return img


def render_sequence(lat: IdentityLatent, cfg: ToyGaitConfig, identity, sequence):
    """Returns (rgb frames (N, S, S, 3), timestamps) for brightness 1."""
    rng = np.random.default_rng([cfg.seed, 11, identity, sequence])
    size = cfg.frame_size
    n = cfg.frames_per_sequence
    duration_s = (n - 1) * cfg.frame_interval_us * 1e-6
    speed = rng.uniform(*cfg.walk_speed)
    travel = speed * duration_s
    x0 = rng.uniform(size * 0.3, max(size * 0.3, size * 0.7 - travel))
    t_off = rng.uniform(0, 1.0 / lat.freq_hz)
    freq = lat.freq_hz * rng.uniform(0.97, 1.03)
    amp = lat.amplitude * rng.uniform(0.95, 1.05)
    body = tuple(v * rng.uniform(0.95, 1.05) for v in (TORSO_LEN, LEG_LEN, HEAD_R))
    colors = {
        "shirt": rng.uniform(0.55, 0.95, 3),
        "pants": rng.uniform(0.45, 0.85, 3),
        "skin": np.array([0.9, 0.75, 0.65]),
    }
    ts = np.arange(n, dtype=np.int64) * cfg.frame_interval_us
    frames = np.stack([
        render_frame(lat, t_off + k * cfg.frame_interval_us * 1e-6,
                     x0 + speed * k * cfg.frame_interval_us * 1e-6, size, colors, freq, amp, body)
        for k in range(n)
    ])
    return frames, ts


def generate_toy_dataset(cfg: ToyGaitConfig):
    """All (identity, sequence, brightness condition) sequences, deterministic per seed."""
    lats = cfg.latents if cfg.latents is not None else identity_latents(cfg.n_identities, cfg.seed)
    out = []
    for ident in range(cfg.n_identities):
        for s in range(cfg.first_sequence, cfg.first_sequence + cfg.sequences_per_identity):
            rgb, ts = render_sequence(lats[ident], cfg, ident, s)
            gray = grayscale(rgb)
            for c, scale in enumerate(cfg.brightness):
                out.append(ToySequence(
                    identity=ident, sequence=s, condition=c, brightness=scale,
                    frames=FrameSequence(gray * scale, ts),
                    rgb_middle=rgb[len(rgb) // 2],
                ))
    return out
