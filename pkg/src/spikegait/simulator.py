"""Frame-to-event synthesis in the style of v2e.

Pipeline: log intensity -> temporal upsampling in the log domain -> per-pixel
first-order low-pass -> threshold-crossing event generation with refractory
dead time -> optional Poisson noise events.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from spikegait import _backend
from spikegait.errors import DataError, InvalidArgument
from spikegait.events import EventStream


@dataclass(frozen=True, eq=False)
class FrameSequence:
    frames: np.ndarray  # (N, H, W), intensities in [0, 1]
    timestamps: np.ndarray  # (N,), microseconds, strictly increasing

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if frames.ndim != 3:
            raise InvalidArgument("frames must have shape (N, H, W)")
        if len(frames) != len(ts) or len(ts) < 2:
            raise InvalidArgument("need at least two frames with one timestamp each")
        if not np.all(np.isfinite(frames)) or frames.min() < 0:
            raise InvalidArgument("intensities must be finite and non-negative")
        if np.any(np.diff(ts) <= 0):
            raise InvalidArgument("timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


@dataclass(frozen=True)
class SimConfig:
    threshold_c: float = 0.2
    cutoff_hz: float = 300.0
    noise_rate_hz: float = 1.0
    refractory_us: float = 100.0
    interp_factor: int = 1
    log_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not self.threshold_c > 0:
            raise InvalidArgument("threshold_c must be positive")
        if self.interp_factor < 1:
            raise InvalidArgument("interp_factor must be >= 1")
        if not self.log_eps > 0:
            raise InvalidArgument("log_eps must be positive")
        if self.cutoff_hz < 0 or self.noise_rate_hz < 0 or self.refractory_us < 0:
            raise InvalidArgument("cutoff, noise rate and refractory period must be >= 0")


def log_intensity(frame, log_eps=1e-3):
    frame = np.asarray(frame, dtype=np.float64)
    if np.any(frame < 0):
        raise InvalidArgument("negative intensity")
    return np.log(frame + log_eps)


def _interp_log(logs, timestamps, factor):
    """Insert factor-1 linear samples between neighbours; returns (logs, times)."""
    if factor == 1:
        return logs, np.asarray(timestamps, dtype=np.int64)
    ts = np.asarray(timestamps, dtype=np.int64)
    if np.any(np.diff(ts) < factor):
        raise InvalidArgument("frame spacing too small for the interpolation factor")
    n = len(logs)
    out = np.empty(((n - 1) * factor + 1,) + logs.shape[1:], dtype=np.float64)
    out_t = np.empty((n - 1) * factor + 1, dtype=np.int64)
    for i in range(n - 1):
        a, b = logs[i], logs[i + 1]
        for j in range(factor):
            w = j / factor
            out[i * factor + j] = a + w * (b - a)
            out_t[i * factor + j] = ts[i] + int(round(j * (ts[i + 1] - ts[i]) / factor))
    out[-1] = logs[-1]
    out_t[-1] = ts[-1]
    return out, out_t


def interpolate_frames(seq: FrameSequence, factor: int, log_eps=1e-3) -> FrameSequence:
    """Upsample in time by linear interpolation of log intensity.

    Inserted frames are ``exp(l) - log_eps`` so that their log intensity is the
    interpolated value.
    """
    if factor < 1:
        raise InvalidArgument("factor must be >= 1")
    if factor == 1:
        return seq
    logs, ts = _interp_log(log_intensity(seq.frames, log_eps), seq.timestamps, factor)
    frames = np.maximum(np.exp(logs) - log_eps, 0.0)
    # original frames are kept verbatim
    frames[::factor] = seq.frames
    return FrameSequence(frames, ts)


def lowpass_filter(logs, timestamps, cutoff_hz):
    """Per-pixel single-pole IIR: ``y_n = y_{n-1} + a_n (x_n - y_{n-1})``.

    ``a_n = dt / (dt + 1 / (2 pi f_c))`` with dt in seconds; y_0 = x_0.
    cutoff_hz == 0 bypasses the filter.
    """
    logs = np.asarray(logs, dtype=np.float64)
    if cutoff_hz < 0:
        raise InvalidArgument("cutoff_hz must be >= 0")
    if cutoff_hz == 0:
        return logs.copy()
    tau = 1.0 / (2.0 * np.pi * cutoff_hz)
    dts = np.diff(np.asarray(timestamps, dtype=np.float64)) * 1e-6
    out = np.empty_like(logs)
    out[0] = logs[0]
    for n in range(1, len(logs)):
        a = dts[n - 1] / (dts[n - 1] + tau)
        out[n] = out[n - 1] + a * (logs[n] - out[n - 1])
    return out


def crossings_from_log(logs, times, threshold_c, refractory_us=0.0, backend=None):
    """Raw crossing events (x, y, t_float, p) of a log-intensity trace, pixel-major."""
    kern = _backend.get_kernels(backend)
    return kern.threshold_crossings(
        np.ascontiguousarray(logs, dtype=np.float64),
        np.ascontiguousarray(times, dtype=np.float64),
        float(threshold_c),
        float(refractory_us),
    )


def events_from_log(logs, times, threshold_c, refractory_us=0.0, backend=None) -> EventStream:
    """Threshold-crossing events of an (N, H, W) log trace sampled at ``times``."""
    times = np.asarray(times, dtype=np.int64)
    x, y, tf, p = crossings_from_log(logs, times, threshold_c, refractory_us, backend)
    t = np.rint(tf).astype(np.int64)
    t0 = int(times[0])
    return EventStream.unsorted(x, y, t, p, logs.shape[2], logs.shape[1], t0, int(times[-1]) - t0)


def generate_events(seq: FrameSequence, cfg: SimConfig, backend=None) -> EventStream:
    logs = log_intensity(seq.frames, cfg.log_eps)
    logs, ts = _interp_log(logs, seq.timestamps, cfg.interp_factor)
    logs = lowpass_filter(logs, ts, cfg.cutoff_hz)
    stream = events_from_log(logs, ts, cfg.threshold_c, cfg.refractory_us, backend)
    if cfg.noise_rate_hz > 0:
        stream = inject_noise(stream, cfg.noise_rate_hz, cfg.seed)
    return stream


def _pixel_rng(seed, x, y):
    # counter-based generator keyed by (seed, x, y): order-independent draws
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, x, y])))


def inject_noise(stream: EventStream, rate_hz, seed) -> EventStream:
    """Add homogeneous Poisson noise events per pixel with fair-coin polarity."""
    if rate_hz < 0:
        raise InvalidArgument("rate_hz must be >= 0")
    if rate_hz == 0 or stream.duration == 0:
        return stream
    lam = rate_hz * stream.duration * 1e-6
    xs, ys, ts, ps = [stream.x], [stream.y], [stream.t], [stream.p.astype(np.int64)]
    for yy in range(stream.height):
        for xx in range(stream.width):
            rng = _pixel_rng(seed, xx, yy)
            n = rng.poisson(lam)
            if n == 0:
                continue
            ts.append(stream.t_start + rng.integers(0, stream.duration + 1, size=n))
            ps.append(np.where(rng.random(n) < 0.5, 1, -1))
            xs.append(np.full(n, xx))
            ys.append(np.full(n, yy))
    return EventStream.unsorted(
        np.concatenate(xs), np.concatenate(ys), np.concatenate(ts), np.concatenate(ps),
        stream.width, stream.height, stream.t_start, stream.duration,
    )


# ---------------------------------------------------------------------------
# PGM frame directories


def read_pgm(path):
    """Read a binary (P5) PGM; returns float intensities in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(v) for v in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise DataError(f"{path}: truncated PGM payload")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.float64) / maxval


def write_pgm(path, frame, maxval=255):
    frame = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    h, w = frame.shape
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.rint(frame * maxval).astype(dtype)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(q.tobytes())


def read_frame_dir(directory, timestamps_file="timestamps.txt") -> FrameSequence:
    """Frames ``*.pgm`` sorted by name plus a sidecar of integer microsecond timestamps."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".pgm"))
    if not names:
        raise DataError(f"no .pgm frames in {directory}")
    ts_path = os.path.join(directory, timestamps_file)
    if not os.path.exists(ts_path):
        raise DataError(f"missing timestamp sidecar {ts_path}")
    with open(ts_path) as f:
        ts = [int(line) for line in f if line.strip()]
    if len(ts) != len(names):
        raise DataError(f"{len(names)} frames but {len(ts)} timestamps")
    frames = np.stack([read_pgm(os.path.join(directory, n)) for n in names])
    try:
        return FrameSequence(frames, np.asarray(ts))
    except InvalidArgument as exc:
        raise DataError(str(exc)) from None


def write_frame_dir(seq: FrameSequence, directory, maxval=255):
    os.makedirs(directory, exist_ok=True)
    width = max(4, len(str(len(seq.frames))))
    for i, fr in enumerate(seq.frames):
        write_pgm(os.path.join(directory, f"{i:0{width}d}.pgm"), fr, maxval)
    with open(os.path.join(directory, "timestamps.txt"), "w") as f:
        f.write("".join(f"{int(t)}\n" for t in seq.timestamps))
