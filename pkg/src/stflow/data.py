"""Grid-sequence datasets: min-max normalization fitted on the training
split only, context-window pairing, seeded uniform-random temporal splits,
two synthetic generators, and the STGRID binary container.

STGRID layout: magic "STGRID01", little-endian u32 T, C, H, W, u8 dtype
tag (0 = f32), T*C*H*W values row-major (t-major), then a u32
length-prefixed UTF-8 block of key=value metadata lines.
"""

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

GRID_MAGIC = b"STGRID01"
_META_KEYS = ("variable", "units", "hours_per_step", "min_z", "max_z")
_MAX_ELEMENTS = 2 ** 31


@dataclass
class GridMeta:
    variable: str = "field"
    units: str = "unitless"
    hours_per_step: float = 1.0
    min_z: float = 0.0
    max_z: float = 1.0


@dataclass
class GridSequence:
    frames: np.ndarray  # (T, C, H, W) float64, physical units
    meta: GridMeta = field(default_factory=GridMeta)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4:
            raise ValueError("frames must be (T, C, H, W)")


@dataclass
class SampleTuple:
    context: np.ndarray  # (ctx, C, H, W)
    target: np.ndarray   # (C, H, W)
    start: int


def normalize_fit(seq, train_starts, context=2):
    """Fit (min_z, max_z) over the frames touched by the TRAINING windows
    only, and store them in the sequence metadata."""
    train_starts = np.asarray(train_starts, dtype=np.int64)
    if train_starts.size == 0:
        raise ValueError("training split is empty")
    idx = np.unique(np.concatenate(
        [train_starts + k for k in range(context + 1)]))
    if idx.min() < 0 or idx.max() >= seq.frames.shape[0]:
        raise ValueError("training window indices out of range")
    frames = seq.frames[idx]
    lo, hi = float(frames.min()), float(frames.max())
    if lo == hi:
        raise ValueError("constant field: min equals max, cannot normalize")
    seq.meta.min_z = lo
    seq.meta.max_z = hi
    return lo, hi


def normalize(x, meta):
    """Map physical values to [0,1] via the fitted range. Out-of-range
    values pass through un-clipped with a warning."""
    if meta.min_z >= meta.max_z:
        raise ValueError("normalization range is empty (min_z >= max_z)")
    out = (np.asarray(x, dtype=np.float64) - meta.min_z) / (meta.max_z - meta.min_z)
    if out.size and (out.min() < 0.0 or out.max() > 1.0):
        log.warning("values outside the fitted range [%s, %s] pass through "
                    "un-clipped", meta.min_z, meta.max_z)
    return out


def denormalize(x, meta):
    return np.asarray(x, dtype=np.float64) * (meta.max_z - meta.min_z) + meta.min_z


def largest_remainder_sizes(n, fractions):
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError("fractions must sum to 1")
    floors = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - fl for f, fl in zip(fractions, floors)]
    short = n - sum(floors)
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        floors[i] += 1
    return tuple(floors)


def split_temporal(n_windows, fractions, seed):
    """Assign window start indices uniformly at random to (train, val,
    test); sizes follow the fractions by largest remainder."""
    if n_windows < 1:
        raise ValueError("no windows to split")
    sizes = largest_remainder_sizes(n_windows, fractions)
    for f, s in zip(fractions, sizes):
        if f > 0 and s == 0:
            raise ValueError(
                f"too few windows ({n_windows}) for one window per split")
    perm = np.random.default_rng(seed).permutation(n_windows)
    a, b, _ = sizes
    return (np.sort(perm[:a]), np.sort(perm[a:a + b]), np.sort(perm[a + b:]))


def make_windows(seq, context=2):
    """All (context -> next frame) tuples in chronological order."""
    if context < 1:
        raise ValueError("context must be >= 1")
    frames = seq.frames if isinstance(seq, GridSequence) else np.asarray(seq)
    t = frames.shape[0]
    if t < context + 1:
        raise ValueError(f"need at least {context + 1} frames, got {t}")
    return [SampleTuple(context=frames[s:s + context], target=frames[s + context],
                        start=s)
            for s in range(t - context)]


# ---- synthetic generators ----

def _blob_field(height, width, rng, blobs):
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    out = np.zeros((height, width))
    scale = min(height, width)
    for _ in range(blobs):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        amp = rng.uniform(0.5, 1.0)
        sig = rng.uniform(scale / 10.0, scale / 5.0)
        dy = np.abs(yy - cy)
        dy = np.minimum(dy, height - dy)
        dx = np.abs(xx - cx)
        dx = np.minimum(dx, width - dx)
        out += amp * np.exp(-(dy * dy + dx * dx) / (2.0 * sig * sig))
    peak = out.max()
    if peak > 0:
        out *= 0.9 / peak
    return out


def _f32_exact(frames):
    # stored as f32 on disk; keep the in-memory values bit-identical to a
    # save/load round trip
    return frames.astype(np.float32).astype(np.float64)


def synth_advection(height, width, frames, n_sequences=1, velocity=(1, 1),
                    seed=0, blobs=3):
    """Gaussian blobs translated by a constant per-step velocity with
    periodic wrap. velocity = (vx, vy) in pixels per step. Returns a list
    of GridSequence, one per seed stream."""
    vx, vy = velocity
    out = []
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, i])
        base = _f32_exact(_blob_field(height, width, rng, blobs))
        seq = np.empty((frames, 1, height, width))
        for t in range(frames):
            seq[t, 0] = np.roll(base, (int(round(vy * t)), int(round(vx * t))),
                                axis=(0, 1))
        out.append(GridSequence(seq, GridMeta(variable="advection")))
    return out


def synth_stochastic(height, width, frames, n_sequences=1, noise_scale=0.1,
                     seed=0, blobs=3, init_field=None):
    """Diffusion smoothing plus seeded random forcing each step, clamped to
    [0,1]. noise_scale = 0 gives the deterministic diffusion path."""
    out = []
    for i in range(n_sequences):
        rng = np.random.default_rng([seed, i])
        if init_field is None:
            x = _blob_field(height, width, rng, blobs)
        else:
            x = np.asarray(init_field, dtype=np.float64).copy()
            if x.shape != (height, width):
                raise ValueError("init_field shape mismatch")
        seq = np.empty((frames, 1, height, width))
        seq[0, 0] = x
        for t in range(1, frames):
            lap = (np.roll(x, 1, 0) + np.roll(x, -1, 0) +
                   np.roll(x, 1, 1) + np.roll(x, -1, 1) - 4.0 * x)
            eta = rng.standard_normal((height, width))
            eta = (eta + np.roll(eta, 1, 0) + np.roll(eta, -1, 0) +
                   np.roll(eta, 1, 1) + np.roll(eta, -1, 1)) / 5.0
            x = np.clip(x + 0.15 * lap + noise_scale * eta, 0.0, 1.0)
            seq[t, 0] = x
        out.append(GridSequence(_f32_exact(seq), GridMeta(variable="stochastic")))
    return out


# ---- STGRID container ----

def save_grid(path, seq):
    t, c, h, w = seq.frames.shape
    meta = seq.meta
    lines = (f"variable={meta.variable}\n"
             f"units={meta.units}\n"
             f"hours_per_step={repr(float(meta.hours_per_step))}\n"
             f"min_z={repr(float(meta.min_z))}\n"
             f"max_z={repr(float(meta.max_z))}\n").encode("utf-8")
    buf = io.BytesIO()
    buf.write(GRID_MAGIC)
    buf.write(struct.pack("<IIII", t, c, h, w))
    buf.write(struct.pack("<B", 0))
    buf.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(lines)))
    buf.write(lines)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_grid(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != GRID_MAGIC:
        raise ValueError(f"not an STGRID file: bad magic at offset 0 "
                         f"({raw[:8]!r})")
    if len(raw) < 25:
        raise ValueError("truncated STGRID header")
    t, c, h, w = struct.unpack_from("<IIII", raw, 8)
    if min(t, c, h, w) == 0:
        raise ValueError(f"invalid STGRID dimensions {t}x{c}x{h}x{w}")
    if t * c * h * w > _MAX_ELEMENTS:
        raise ValueError("STGRID dimensions overflow the element limit")
    (tag,) = struct.unpack_from("<B", raw, 24)
    if tag != 0:
        raise ValueError(f"unknown STGRID dtype tag {tag}")
    n = t * c * h * w
    end = 25 + 4 * n
    if len(raw) < end + 4:
        raise ValueError(f"truncated STGRID payload at offset {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f4", count=n, offset=25)
    frames = frames.astype(np.float64).reshape(t, c, h, w)
    (mlen,) = struct.unpack_from("<I", raw, end)
    if len(raw) != end + 4 + mlen:
        raise ValueError("STGRID metadata length mismatch")
    meta = _parse_meta(raw[end + 4:].decode("utf-8"))
    return GridSequence(frames, meta)


def _parse_meta(text):
    got = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"malformed metadata line: {line!r}")
        key, value = line.split("=", 1)
        if key not in _META_KEYS:
            raise ValueError(f"unknown metadata key: {key!r}")
        got[key] = value
    missing = [k for k in _META_KEYS if k not in got]
    if missing:
        raise ValueError(f"metadata missing keys: {missing}")
    return GridMeta(variable=got["variable"], units=got["units"],
                    hours_per_step=float(got["hours_per_step"]),
                    min_z=float(got["min_z"]), max_z=float(got["max_z"]))


def write_pgm(path, frame, lo, hi):
    """8-bit binary PGM of a 2-D field, linearly scaled from [lo, hi]."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("PGM frames must be 2-D")
    if hi <= lo:
        raise ValueError("empty scaling range")
    scaled = np.clip((frame - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = frame.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
