"""Event stream data model, voxelization and spatial pre-processing."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from spikegait import _backend
from spikegait.errors import FormatError, InvalidArgument, InvalidStream


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted events of one sensor over the window ``[t_start, t_start + duration]``.

    Coordinates and timestamps are integers (pixels, microseconds); polarity is
    +1 or -1. Arrays are read-only once constructed.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int = 0
    duration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, np.int64))
        object.__setattr__(self, "y", _frozen(self.y, np.int64))
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        object.__setattr__(self, "p", _frozen(self.p, np.int8))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise InvalidStream("x, y, t, p must have equal length")
        if self.width < 1 or self.height < 1:
            raise InvalidStream("sensor geometry must be at least 1x1")
        if self.duration < 0:
            raise InvalidStream("window length must be non-negative")
        if n == 0:
            return
        if np.any((self.p != 1) & (self.p != -1)):
            raise InvalidStream("polarity must be +1 or -1")
        if self.x.min() < 0 or self.x.max() >= self.width:
            raise InvalidStream("x coordinate outside sensor")
        if self.y.min() < 0 or self.y.max() >= self.height:
            raise InvalidStream("y coordinate outside sensor")
        if np.any(np.diff(self.t) < 0):
            raise InvalidStream("timestamps must be non-decreasing")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise InvalidStream("event timestamp outside the exposure window")

    @classmethod
    def from_events(cls, events: Sequence, width, height, t_start=0, duration=None):
        arr = np.asarray([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        order = np.argsort(arr[:, 2], kind="stable")
        arr = arr[order]
        if duration is None:
            duration = int(arr[-1, 2] - t_start) if len(arr) else 0
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, t_start, duration)

    @classmethod
    def empty(cls, width, height, t_start=0, duration=0):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, t_start, duration)

    @classmethod
    def unsorted(cls, x, y, t, p, width, height, t_start=0, duration=0):
        """Build a stream from arrays in any order (canonical (t, y, x, p) order applied)."""
        x, y, t, p = (np.asarray(a) for a in (x, y, t, p))
        order = np.lexsort((p, x, y, t))
        return cls(x[order], y[order], t[order], p[order], width, height, t_start, duration)

    @property
    def t_end(self):
        return self.t_start + self.duration

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(*row)

    def same_as(self, other: "EventStream") -> bool:
        return (
            (self.width, self.height, self.t_start, self.duration)
            == (other.width, other.height, other.t_start, other.duration)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    def canonical_order(self):
        """Stable sort permutation by (t, y, x, p)."""
        return np.lexsort((self.p, self.x, self.y, self.t))

    def select_window(self, a, b, closed=False) -> "EventStream":
        """Events with ``a <= t < b`` (``<= b`` when closed), re-windowed to [a, b]."""
        lo = np.searchsorted(self.t, a, side="left")
        hi = np.searchsorted(self.t, b, side="right" if closed else "left")
        sl = slice(lo, hi)
        return EventStream(
            self.x[sl], self.y[sl], self.t[sl], self.p[sl], self.width, self.height, a, b - a
        )


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """2 x K x H x W accumulation; channel 0 positive polarity, channel 1 negative."""

    data: np.ndarray
    delta_t: float
    origin: int = 0

    @property
    def K(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]

    @property
    def mass(self):
        return float(self.data.sum())

    def replace_data(self, data):
        return VoxelGrid(data, self.delta_t, self.origin)


@dataclass(frozen=True)
class TwoScaleSlices:
    dynamic: list = field(default_factory=list)
    static_grid: VoxelGrid | None = None

    def dynamic_array(self):
        """Dynamic slices stacked to (n_slices, 2K, H, W)."""
        return np.stack([g.data.reshape(-1, g.height, g.width) for g in self.dynamic])

    def static_array(self):
        g = self.static_grid
        return g.data.reshape(-1, g.height, g.width)


def voxelize(stream: EventStream, K: int, backend=None) -> VoxelGrid:
    """Bilinear temporal voxel grid of ``stream`` with K bins over its window.

    Each event deposits ``max(0, 1 - |t - t_k| / dT)`` into bin k of its
    polarity channel, where ``t_k = t_start + (k + 0.5) dT`` and ``dT = T / K``.
    Events are accumulated in canonical (t, y, x, p) order so that the float
    sums do not depend on the input ordering.
    """
    if K < 1:
        raise InvalidArgument(f"bin count must be >= 1, got {K}")
    if stream.duration <= 0:
        raise InvalidArgument("window length must be positive")
    n = len(stream)
    if n and (stream.t.min() < stream.t_start or stream.t.max() > stream.t_end):
        raise InvalidStream("event timestamp outside the exposure window")
    kern = _backend.get_kernels(backend)
    order = stream.canonical_order()
    data = kern.voxel_deposit(
        np.ascontiguousarray(stream.x[order]),
        np.ascontiguousarray(stream.y[order]),
        np.ascontiguousarray(stream.t[order]),
        np.ascontiguousarray(stream.p[order]),
        int(stream.t_start),
        int(stream.duration),
        int(K),
        int(stream.height),
        int(stream.width),
    )
    return VoxelGrid(np.asarray(data), stream.duration / K, stream.t_start)


def split_bounds(t_start, duration, n):
    """Sub-window edges; the last sub-window absorbs the remainder."""
    base = duration // n
    if base < 1:
        raise InvalidArgument(f"window of {duration} us cannot be split into {n} slices")
    edges = [t_start + i * base for i in range(n)] + [t_start + duration]
    return list(zip(edges[:-1], edges[1:]))


def two_scale_split(stream: EventStream, num_dynamic_slices: int, K_dynamic: int = 4,
                    K_static: int = 8, backend=None) -> TwoScaleSlices:
    """Short-term slices for the dynamic stream plus one long-term grid over the window."""
    if num_dynamic_slices < 1:
        raise InvalidArgument("num_dynamic_slices must be >= 1")
    bounds = split_bounds(stream.t_start, stream.duration, num_dynamic_slices)
    dynamic = []
    for i, (a, b) in enumerate(bounds):
        sub = stream.select_window(a, b, closed=i == len(bounds) - 1)
        dynamic.append(voxelize(sub, K_dynamic, backend))
    return TwoScaleSlices(dynamic, voxelize(stream, K_static, backend))


def crop_grid(grid: VoxelGrid, bbox) -> VoxelGrid:
    """Sub-grid over ``bbox = (x0, y0, x1, y1)`` (half-open) intersected with the grid."""
    x0, y0, x1, y1 = (int(v) for v in bbox)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, grid.width), min(y1, grid.height)
    if x1 <= x0 or y1 <= y0:
        raise InvalidArgument(f"bbox {tuple(bbox)} does not intersect the grid")
    return grid.replace_data(grid.data[:, :, y0:y1, x0:x1].copy())


def resize_matrix(n_in, n_out):
    """Row-stochastic (n_out x n_in) bilinear resampling matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        if f > 0.0:
            m[i, i1] += f
    return m


def bilinear_resize(planes, out_h, out_w):
    """Resample the last two axes of ``planes`` to (out_h, out_w)."""
    planes = np.asarray(planes, dtype=np.float64)
    h, w = planes.shape[-2:]
    if (h, w) == (out_h, out_w):
        return planes.copy()
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    return ry @ planes @ rx.T


def pad_to_square(planes):
    """Zero-pad the shorter spatial side symmetrically; returns (padded, (top, left))."""
    h, w = planes.shape[-2:]
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.zeros(planes.shape[:-2] + (side, side), dtype=np.float64)
    out[..., top:top + h, left:left + w] = planes
    return out, (top, left)


def pad_and_resize(grid: VoxelGrid, size: int = 64) -> VoxelGrid:
    if grid.height < 1 or grid.width < 1:
        raise InvalidArgument("cannot resize an empty grid")
    padded, _ = pad_to_square(grid.data)
    return grid.replace_data(bilinear_resize(padded, size, size))


def event_bbox(planes, frac=0.05, pad=2, floor_q=10):
    """Bounding box of the region carrying event mass.

    Row and column mass profiles have a noise floor (their ``floor_q``
    percentile) removed; rows/columns keeping at least ``frac`` of the peak are
    inside the box. Returns ``(x0, y0, x1, y1)`` half-open, or the full extent
    when there is no mass above the floor.
    """
    img = np.asarray(planes, dtype=np.float64)
    img = img.reshape(-1, *img.shape[-2:]).sum(axis=0)
    h, w = img.shape
    cols, rows = img.sum(axis=0), img.sum(axis=1)
    cols = cols - np.percentile(cols, floor_q)
    rows = rows - np.percentile(rows, floor_q)
    if cols.max() <= 0 or rows.max() <= 0:
        return (0, 0, w, h)
    xs = np.nonzero(cols >= frac * cols.max())[0]
    ys = np.nonzero(rows >= frac * rows.max())[0]
    return (
        max(int(xs[0]) - pad, 0),
        max(int(ys[0]) - pad, 0),
        min(int(xs[-1]) + 1 + pad, w),
        min(int(ys[-1]) + 1 + pad, h),
    )


# ---------------------------------------------------------------------------
# EVS1 binary / CSV event files

EVS_MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sHHQ")
_COUNTS = struct.Struct("<QQ")
_RECORD = np.dtype(
    {"names": ["x", "y", "t", "p"], "formats": ["<u2", "<u2", "<u8", "i1"],
     "offsets": [0, 2, 4, 12], "itemsize": 16}
)
HEADER_SIZE = _HEADER.size + _COUNTS.size


def write_events(stream: EventStream, path):
    path = os.fspath(path)
    if path.lower().endswith(".csv"):
        _write_csv(stream, path)
        return
    if stream.width > 0xFFFF or stream.height > 0xFFFF:
        raise InvalidArgument("EVS1 geometry is limited to 65535 pixels")
    rec = np.zeros(len(stream), dtype=_RECORD)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EVS_MAGIC, stream.width, stream.height, stream.t_start))
        f.write(_COUNTS.pack(stream.duration, len(stream)))
        f.write(rec.tobytes())


def read_events(path) -> EventStream:
    path = os.fspath(path)
    if path.lower().endswith(".csv"):
        return _read_csv(path)
    with open(path, "rb") as f:
        buf = f.read()
    return decode_events(buf)


def decode_events(buf: bytes) -> EventStream:
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", offset=len(buf))
    magic, width, height, t_start = _HEADER.unpack_from(buf, 0)
    if magic != EVS_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if width == 0 or height == 0:
        raise FormatError("zero sensor geometry", offset=4)
    duration, count = _COUNTS.unpack_from(buf, _HEADER.size)
    need = HEADER_SIZE + count * _RECORD.itemsize
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes for {count} records, got {len(buf)}",
                          offset=min(len(buf), need))
    rec = np.frombuffer(buf, dtype=_RECORD, count=count, offset=HEADER_SIZE)

    def at(i, field_offset):
        return HEADER_SIZE + int(i) * _RECORD.itemsize + field_offset

    p = rec["p"]
    bad = np.nonzero((p != 1) & (p != -1))[0]
    if len(bad):
        raise FormatError(f"polarity byte {int(p[bad[0]])}", offset=at(bad[0], 12), record=int(bad[0]))
    bad = np.nonzero(rec["x"] >= width)[0]
    if len(bad):
        raise FormatError("x out of range", offset=at(bad[0], 0), record=int(bad[0]))
    bad = np.nonzero(rec["y"] >= height)[0]
    if len(bad):
        raise FormatError("y out of range", offset=at(bad[0], 2), record=int(bad[0]))
    t = rec["t"].astype(np.int64)
    bad = np.nonzero(np.diff(t) < 0)[0]
    if len(bad):
        i = int(bad[0]) + 1
        raise FormatError("timestamp decreases", offset=at(i, 4), record=i)
    bad = np.nonzero((t < t_start) | (t > t_start + duration))[0]
    if len(bad):
        raise FormatError("timestamp outside window", offset=at(bad[0], 4), record=int(bad[0]))
    return EventStream(rec["x"], rec["y"], t, p, width, height, t_start, duration)


def _write_csv(stream, path):
    with open(path, "w") as f:
        f.write(f"# width={stream.width} height={stream.height} "
                f"t_start={stream.t_start} duration={stream.duration}\n")
        f.write("x,y,t,p\n")
        for e in stream:
            f.write(f"{e.x},{e.y},{e.t},{e.p}\n")


def _read_csv(path):
    with open(path) as f:
        lines = f.read().splitlines()
    meta = {}
    i = 0
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            k, _, v = tok.partition("=")
            meta[k] = v
        i = 1
    if i >= len(lines) or lines[i].replace(" ", "") != "x,y,t,p":
        raise FormatError("missing x,y,t,p header row", offset=i + 1)
    try:
        width, height = int(meta["width"]), int(meta["height"])
        t_start, duration = int(meta.get("t_start", 0)), int(meta["duration"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad metadata line: {exc}", offset=1) from None
    rows = []
    for ln, line in enumerate(lines[i + 1:], start=i + 2):
        if not line.strip():
            continue
        try:
            x, y, t, p = (int(v) for v in line.split(","))
        except ValueError:
            raise FormatError(f"bad record {line!r}", offset=ln) from None
        if p not in (1, -1):
            raise FormatError(f"polarity {p}", offset=ln, record=len(rows))
        if not (0 <= x < width and 0 <= y < height):
            raise FormatError("coordinate out of range", offset=ln, record=len(rows))
        if rows and t < rows[-1][2]:
            raise FormatError("timestamp decreases", offset=ln, record=len(rows))
        if not (t_start <= t <= t_start + duration):
            raise FormatError("timestamp outside window", offset=ln, record=len(rows))
        rows.append((x, y, t, p))
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, t_start, duration)


# ---------------------------------------------------------------------------
# VXG1 grid container written by the ``voxelize`` command

VXG_MAGIC = b"VXG1"
_GRID_HEAD = struct.Struct("<IIIqd")


def write_grids(grids: Sequence[VoxelGrid], path, n_dynamic=None):
    """Write grids as: magic, u32 count, u32 n_dynamic, then per grid
    {u32 K, u32 H, u32 W, i64 origin, f64 delta_t, f64 data[2*K*H*W]}."""
    n_dynamic = len(grids) if n_dynamic is None else n_dynamic
    with open(path, "wb") as f:
        f.write(VXG_MAGIC + struct.pack("<II", len(grids), n_dynamic))
        for g in grids:
            f.write(_GRID_HEAD.pack(g.K, g.height, g.width, int(g.origin), float(g.delta_t)))
            f.write(np.ascontiguousarray(g.data, dtype="<f8").tobytes())


def read_grids(path):
    """Inverse of :func:`write_grids`; returns (grids, n_dynamic)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != VXG_MAGIC:
        raise FormatError("bad magic", offset=0)
    count, n_dynamic = struct.unpack_from("<II", buf, 4)
    off = 12
    grids = []
    for _ in range(count):
        if off + _GRID_HEAD.size > len(buf):
            raise FormatError("truncated grid header", offset=off)
        K, H, W, origin, delta_t = _GRID_HEAD.unpack_from(buf, off)
        off += _GRID_HEAD.size
        n = 2 * K * H * W
        if off + 8 * n > len(buf):
            raise FormatError("truncated grid payload", offset=off)
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(2, K, H, W).copy()
        off += 8 * n
        grids.append(VoxelGrid(data, delta_t, origin))
    return grids, n_dynamic
