"""Event streams, rasters and the synthetic moving-bar dataset."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EventList",
    "RasterConfig",
    "EventParseError",
    "EventValidationError",
    "load_events",
    "save_events",
    "rasterize",
    "raster_to_new_events",
    "binarize_image",
    "load_binarized_mnist",
    "accumulate_frames",
    "synth_dataset",
    "bar_raster",
    "save_raster",
    "load_raster",
    "BAR_CLASSES",
]

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u4"), ("y", "<u4"), ("p", "u1")])


class EventParseError(ValueError):
    pass


class EventValidationError(ValueError):
    pass


@dataclass(frozen=True)
class EventList:
    """Time-sorted events in a structured array with fields ``t, x, y, p``."""

    events: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=EVENT_DTYPE)
        if len(ev) and (ev["x"].max() >= self.width or ev["y"].max() >= self.height):
            raise EventValidationError(f"event coordinates outside {self.width}x{self.height} sensor")
        if len(ev) and ev["p"].max() > 1:
            raise EventValidationError("polarity must be 0 or 1")
        if len(ev) > 1 and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            ev = ev[np.argsort(ev["t"], kind="stable")]
        object.__setattr__(self, "events", ev)

    @classmethod
    def from_tuples(cls, rows, width, height):
        return cls(np.array([tuple(r) for r in rows], dtype=EVENT_DTYPE), width, height)

    def __len__(self):
        return len(self.events)

    def tuples(self):
        return [(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"])) for e in self.events]

    def __eq__(self, other):
        return (isinstance(other, EventList) and self.width == other.width and self.height == other.height
                and np.array_equal(self.events, other.events))


@dataclass(frozen=True)
class RasterConfig:
    duration_us: int
    n_bins: int
    max_per_cell: int = 1
    n_polarities: int = 2

    def __post_init__(self):
        if self.duration_us <= 0:
            raise ValueError("duration_us must be positive")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.max_per_cell < 1:
            raise ValueError("max_per_cell must be >= 1")

    def bin_center(self, b, t_start=0):
        """Integer timestamp nearest the middle of bin ``b`` that still falls inside it."""
        return int(t_start) + int(_bin_centers(np.asarray([b]), self.duration_us, self.n_bins)[0])


def _bin_centers(b, duration, n_bins):
    # floor((b + 0.5) * D / T), clamped to [ceil(b D / T), ceil((b + 1) D / T) - 1] because
    # the floor can fall into the previous bin when D / T is small and fractional
    b = np.asarray(b, dtype=np.int64)
    mid = ((2 * b + 1) * duration) // (2 * n_bins)
    lo = -((-b * duration) // n_bins)
    hi = -((-(b + 1) * duration) // n_bins) - 1
    return np.clip(mid, lo, np.maximum(hi, lo))


# --------------------------------------------------------------------------- files

_RAW_MAGIC = b"EVT0"
_RASTER_MAGIC = b"RAS0"


def load_events(path, format="csv", width=None, height=None) -> EventList:
    """Read events from a ``t,x,y,p`` CSV file or an ``EVT0`` raw file.

    CSV files do not carry the sensor size, so ``width`` and ``height`` are
    required for them; raw files declare their own.
    """
    if format == "csv":
        if width is None or height is None:
            raise ValueError("csv event files need explicit width and height")
        rows = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["t", "x", "y", "p"]:
                raise EventParseError(f"{path}:1: expected header 't,x,y,p'")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    vals = tuple(int(v) for v in row)
                except ValueError:
                    raise EventParseError(f"{path}:{lineno}: non-integer field in {row!r}") from None
                if len(vals) != 4 or min(vals) < 0:
                    raise EventParseError(f"{path}:{lineno}: expected four non-negative integers")
                rows.append(vals)
        return EventList.from_tuples(rows, width, height)
    if format == "raw":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != _RAW_MAGIC:
            raise EventParseError(f"{path}: offset 0: bad magic {data[:4]!r}")
        if len(data) < 16:
            raise EventParseError(f"{path}: offset 4: truncated header")
        w, h, n = struct.unpack_from("<III", data, 4)
        body = data[16:]
        if len(body) != 16 * n:
            raise EventParseError(f"{path}: offset 16: expected {n} records ({16 * n} bytes), got {len(body)} bytes")
        rec = np.frombuffer(body, dtype="<u4").reshape(n, 4)
        if n and rec[:, 3].max() > 1:
            bad = int(np.argmax(rec[:, 3] > 1))
            raise EventParseError(f"{path}: offset {16 + 16 * bad}: polarity out of range")
        ev = np.zeros(n, dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = rec[:, 0], rec[:, 1], rec[:, 2], rec[:, 3]
        return EventList(ev, width if width is not None else w, height if height is not None else h)
    raise ValueError(f"unknown event format {format!r}")


def save_events(events: EventList, path, format="csv"):
    ev = events.events
    if format == "csv":
        with open(path, "w", newline="") as f:
            f.write("t,x,y,p\n")
            for t, x, y, p in events.tuples():
                f.write(f"{t},{x},{y},{p}\n")
    elif format == "raw":
        rec = np.stack([ev["t"], ev["x"], ev["y"], ev["p"]], axis=1).astype("<u4")
        with open(path, "wb") as f:
            f.write(_RAW_MAGIC + struct.pack("<III", events.width, events.height, len(ev)))
            f.write(rec.tobytes())
    else:
        raise ValueError(f"unknown event format {format!r}")


def save_raster(raster, path):
    """Write a ``[T, P, H, W]`` count raster as ``RAS0`` (u8 counts)."""
    raster = np.asarray(raster)
    if raster.ndim != 4:
        raise ValueError("raster must be 4-D [T, P, H, W]")
    if raster.min(initial=0) < 0 or raster.max(initial=0) > 255:
        raise ValueError("raster counts must fit in u8")
    with open(path, "wb") as f:
        f.write(_RASTER_MAGIC + struct.pack("<IIII", *raster.shape))
        f.write(raster.astype(np.uint8).tobytes())


def load_raster(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _RASTER_MAGIC:
        raise ValueError(f"{path}: not a RAS0 raster")
    shape = struct.unpack_from("<IIII", data, 4)
    body = np.frombuffer(data, dtype=np.uint8, offset=20)
    if body.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} bytes of counts, got {body.size}")
    return body.reshape(shape).copy()


# --------------------------------------------------------------------------- rasters


def rasterize(events: EventList, cfg: RasterConfig, t_start=0) -> np.ndarray:
    """Bin events in ``[t_start, t_start + duration)`` into a ``[T, P, H, W]`` count raster."""
    ev = events.events
    t = ev["t"].astype(np.int64) - int(t_start)
    keep = (t >= 0) & (t < cfg.duration_us) & (ev["p"] < cfg.n_polarities)
    t = t[keep]
    b = (t * cfg.n_bins) // cfg.duration_us
    shape = (cfg.n_bins, cfg.n_polarities, events.height, events.width)
    counts = np.zeros(shape, dtype=np.int64)
    np.add.at(counts, (b, ev["p"][keep].astype(np.int64), ev["y"][keep].astype(np.int64),
                       ev["x"][keep].astype(np.int64)), 1)
    return np.minimum(counts, cfg.max_per_cell).astype(np.uint8)


def raster_to_new_events(original: EventList, original_raster, adv_raster, cfg: RasterConfig,
                         t_start=0, honor_removals=False) -> EventList:
    """Merge the events added by an attack back into the original stream.

    Every voxel where the attacked raster exceeds the original yields that many
    new events stamped at the bin center. Removals are ignored unless
    ``honor_removals`` is set, in which case the latest matching original
    events in a decremented voxel are deleted.
    """
    original_raster = np.asarray(original_raster)
    adv_raster = np.asarray(adv_raster)
    if original_raster.shape != adv_raster.shape:
        raise EventValidationError(f"raster shapes differ: {original_raster.shape} vs {adv_raster.shape}")
    expected = (cfg.n_bins, cfg.n_polarities, original.height, original.width)
    if original_raster.shape != expected:
        raise EventValidationError(f"raster shape {original_raster.shape} does not match config {expected}")
    diff = adv_raster.astype(np.int64) - original_raster.astype(np.int64)
    ev = original.events
    if honor_removals and np.any(diff < 0):
        t = ev["t"].astype(np.int64) - int(t_start)
        inside = (t >= 0) & (t < cfg.duration_us)
        bins = np.where(inside, (t * cfg.n_bins) // cfg.duration_us, -1)
        drop = np.zeros(len(ev), dtype=bool)
        for b, p, y, x in zip(*np.nonzero(diff < 0)):
            idx = np.nonzero((bins == b) & (ev["p"] == p) & (ev["y"] == y) & (ev["x"] == x))[0]
            n = -diff[b, p, y, x]
            drop[idx[::-1][:n]] = True
        ev = ev[~drop]
    add = np.clip(diff, 0, None)
    b, p, y, x = np.nonzero(add)
    reps = add[b, p, y, x]
    new = np.zeros(int(reps.sum()), dtype=EVENT_DTYPE)
    centers = int(t_start) + _bin_centers(b, cfg.duration_us, cfg.n_bins)
    new["t"] = np.repeat(centers, reps)
    new["x"] = np.repeat(x, reps)
    new["y"] = np.repeat(y, reps)
    new["p"] = np.repeat(p, reps)
    merged = np.concatenate([ev, new])
    merged = merged[np.argsort(merged["t"], kind="stable")]
    return EventList(merged, original.width, original.height)


def binarize_image(gray) -> np.ndarray:
    """Map 0..127 to 0 and 128..255 to 1."""
    gray = np.asarray(gray)
    if gray.size and (gray.min() < 0 or gray.max() > 255):
        raise ValueError("grayscale values must lie in [0, 255]")
    return (gray > 127).astype(np.uint8)


def accumulate_frames(raster) -> np.ndarray:
    """Sum a raster (or batch of rasters) over its time axis."""
    raster = np.asarray(raster)
    return raster.sum(axis=-4)


# --------------------------------------------------------------------------- synthetic data

# (name, d_row, d_col, bar orientation); classes 2k and 2k+1 are time-reversals.
BAR_CLASSES = [
    ("right", 0, 1, "vertical"),
    ("left", 0, -1, "vertical"),
    ("down", 1, 0, "horizontal"),
    ("up", -1, 0, "horizontal"),
    ("down_right", 1, 1, "antidiagonal"),
    ("up_left", -1, -1, "antidiagonal"),
    ("down_left", 1, -1, "diagonal"),
    ("up_right", -1, 1, "diagonal"),
]


def bar_raster(cls, H, W, T, start, length, offset=0) -> np.ndarray:
    """Noise-free ON-polarity raster of a one-pixel bar moving one pixel per bin.

    ``start`` is the bar position along its motion axis at the first bin of a
    forward-moving class; a reversed class traverses the same positions in the
    opposite order so both classes integrate to the same frame. Motion wraps
    around the sensor edge.
    """
    orient = BAR_CLASSES[cls][3]
    frame = np.zeros((H, W), dtype=np.uint8)
    if orient == "vertical":
        frame[offset:offset + length, 0] = 1
    elif orient == "horizontal":
        frame[0, offset:offset + length] = 1
    else:
        n = min(H, W)
        idx = np.arange(offset, min(offset + length, n))
        if orient == "antidiagonal":
            frame[idx, (n - 1 - idx) % W] = 1
        else:
            frame[idx, idx] = 1
    _, fr, fc, _ = BAR_CLASSES[cls - cls % 2]
    reverse = cls % 2 == 1
    out = np.zeros((T, 2, H, W), dtype=np.uint8)
    for t in range(T):
        k = start + (T - 1 - t if reverse else t)
        out[t, 1] = np.roll(frame, (k * fr, k * fc), axis=(0, 1))
    return out


def _bar(cls, H, W, T, rng):
    orient = BAR_CLASSES[cls][3]
    span = W if orient == "horizontal" else H
    if orient in ("diagonal", "antidiagonal"):
        span = min(H, W)
    length = int(rng.integers(max(2, span // 2), span + 1))
    offset = int(rng.integers(0, span - length + 1))
    axis_len = W if orient == "vertical" else H
    start = int(rng.integers(0, axis_len))
    return bar_raster(cls, H, W, T, start, length, offset)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def save(self, path):
        np.savez_compressed(path, x_train=self.x_train, y_train=self.y_train,
                            x_test=self.x_test, y_test=self.y_test)

    @classmethod
    def load(cls, path):
        with np.load(path) as d:
            return cls(d["x_train"], d["y_train"], d["x_test"], d["y_test"])


def load_binarized_mnist(path, fraction=1.0, seed=0) -> Dataset:
    """Binarized MNIST from an ``mnist.npz`` archive (x_train, y_train, x_test, y_test).

    Images become single-bin rasters ``[N, 1, 1, 28, 28]``. ``fraction`` keeps
    a random subset of the training split; the test split is kept whole.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    with np.load(path) as d:
        x_train, y_train, x_test, y_test = (d[k] for k in ("x_train", "y_train", "x_test", "y_test"))
    if fraction < 1:
        keep = np.sort(np.random.default_rng(seed).permutation(len(x_train))[:int(round(fraction * len(x_train)))])
        x_train, y_train = x_train[keep], y_train[keep]

    def rasters(imgs):
        return binarize_image(imgs)[:, None, None]

    return Dataset(rasters(x_train), y_train.astype(np.int64), rasters(x_test), y_test.astype(np.int64))


def synth_dataset(n_classes=4, H=16, W=16, T=10, n_train=512, n_test=256, noise_rate=0.005,
                  seed=0) -> Dataset:
    """Moving-bar event rasters, deterministic given ``seed``.

    Classes pair up as time-reversals (right/left, down/up, ...), so some
    classes can only be told apart by temporal order. Salt-and-pepper noise
    flips each voxel independently with probability ``noise_rate``.
    """
    if min(H, W, T) < 4:
        raise ValueError("H, W and T must be at least 4")
    if not 2 <= n_classes <= len(BAR_CLASSES):
        raise ValueError(f"n_classes must be in [2, {len(BAR_CLASSES)}]")
    if not 0 <= noise_rate <= 1:
        raise ValueError("noise_rate must be in [0, 1]")
    rng = np.random.default_rng(seed)

    def split(n):
        y = np.arange(n) % n_classes
        rng.shuffle(y)
        x = np.stack([_bar(int(c), H, W, T, rng) for c in y]) if n else np.zeros((0, T, 2, H, W), np.uint8)
        if noise_rate:
            x ^= (rng.random(x.shape) < noise_rate).astype(np.uint8)
        return x, y.astype(np.int64)

    x_train, y_train = split(n_train)
    x_test, y_test = split(n_test)
    return Dataset(x_train, y_train, x_test, y_test)
