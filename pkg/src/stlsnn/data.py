"""Dataset ingestion, spike/analog encoders, event slicing and noise corruption.

File formats
------------
IDX (big-endian): magic ``0x00000803`` then ``N, H, W`` as uint32 and the
``N*H*W`` pixel bytes for images; magic ``0x00000801`` then ``N`` and ``N``
label bytes for labels. Files ending in ``.gz`` are transparently
(de)compressed.

Event text: first line ``H,W``, then one event per line ``t_us,x,y,pol``
with nondecreasing integer timestamps in microseconds and ``pol`` in {0, 1}.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ConsistencyError,
    EmptyInputError,
    FormatError,
    LengthError,
    OrderError,
    ParseError,
    RangeError,
    ShapeError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------- types


@dataclass
class ImageSet:
    pixels: np.ndarray  # [N, ch, H, W] in [0, 1]
    labels: np.ndarray  # [N] ints

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise ConsistencyError(f"{len(self.pixels)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.pixels[idx], self.labels[idx])


@dataclass
class EventStream:
    t: np.ndarray  # microseconds, nondecreasing
    x: np.ndarray
    y: np.ndarray
    pol: np.ndarray
    H: int
    W: int

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_rows(cls, rows, H, W) -> "EventStream":
        a = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
        return cls(a[:, 0], a[:, 1], a[:, 2], a[:, 3], int(H), int(W))


class NoiseKind(str, Enum):
    SALT_PEPPER = "salt_pepper"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.SALT_PEPPER
    nl: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not 0 <= self.nl <= 1:
            raise ConfigError(f"noise level must lie in [0, 1], got {self.nl}")


@dataclass
class Dataset:
    """Samples plus how to turn them into a [T, batch, ...] input window.

    ``encoding`` is ``"bernoulli"`` (pixels become spike trains), ``"direct"``
    (analog pixels repeated at every step, fed to the encoding layer) or
    ``"frames"`` (inputs already are [N, T, ...] frame tensors).
    """

    inputs: np.ndarray
    labels: np.ndarray
    encoding: str = "bernoulli"

    def __post_init__(self):
        if self.encoding not in ("bernoulli", "direct", "frames"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if len(self.inputs) != len(self.labels):
            raise ConsistencyError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.inputs.shape[2:] if self.encoding == "frames" else self.inputs.shape[1:]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.encoding)

    def window(self, idx, T, rng=None):
        """Encoded input window [T, len(idx), ...] for samples ``idx``."""
        batch = self.inputs[idx]
        if self.encoding == "bernoulli":
            return bernoulli_encode(batch, T, rng)
        if self.encoding == "direct":
            return direct_encode(batch, T)
        if batch.shape[1] != T:
            raise ShapeError(f"frame tensors have {batch.shape[1]} slices, window is T={T}")
        return np.swapaxes(batch, 0, 1)


# ---------------------------------------------------------------- IDX


def _open(path, mode):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a uint8 array."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise LengthError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX files are supported (magic 0x{magic:08x})")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise LengthError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims)) if dims else 1
    if len(raw) - head != n:
        raise LengthError(f"{path}: header declares {n} bytes of data, file holds {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (gzip if the name ends in .gz)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise FormatError("IDX writer only handles uint8 arrays")
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    with _open(path, "wb") as f:
        f.write(header + a.tobytes())


def load_idx(images_path, labels_path) -> ImageSet:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    pixels = images.astype(np.float64)[:, None] / 255.0
    return ImageSet(pixels, labels.astype(np.int64))


def save_idx(images_path, labels_path, data: ImageSet):
    pix = np.asarray(data.pixels)
    if pix.ndim == 4:
        if pix.shape[1] != 1:
            raise ShapeError("IDX images must be single-channel")
        pix = pix[:, 0]
    write_idx(images_path, np.rint(np.clip(pix, 0, 1) * 255).astype(np.uint8))
    write_idx(labels_path, np.asarray(data.labels).astype(np.uint8))


def downsample(pixels, factor):
    """Block-average the last two axes by an integer ``factor``."""
    if factor == 1:
        return pixels
    *lead, h, w = pixels.shape
    if h % factor or w % factor:
        raise ShapeError(f"image {h}x{w} not divisible by {factor}")
    return pixels.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


# ---------------------------------------------------------------- encoders


def bernoulli_encode(image, T, seed=None):
    """Spike tensor [T, *image.shape]; each entry fires with probability = pixel."""
    image = np.asarray(image, dtype=float)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise RangeError("Bernoulli encoding needs pixels in [0, 1]")
    rng = np.random.default_rng(seed)
    return (rng.random((T,) + image.shape) < image).astype(float)


def direct_encode(image, T):
    """Analog input repeated at every step: [T, *image.shape]."""
    image = np.asarray(image, dtype=float)
    return np.broadcast_to(image, (T,) + image.shape).copy()


# ---------------------------------------------------------------- events


def load_events(path) -> EventStream:
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().split("\n")
    if not lines or not lines[0].strip():
        raise ParseError("missing 'H,W' header", line=1)
    try:
        H, W = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise ParseError(f"bad header {lines[0]!r}, expected 'H,W'", line=1) from None
    if H < 1 or W < 1:
        raise ParseError("sensor dims must be positive", line=1)
    rows = []
    last = None
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            t, x, y, pol = (int(v) for v in parts)
        except ValueError:
            raise ParseError(f"bad event {line!r}, expected 't_us,x,y,pol'", line=no) from None
        if not (0 <= x < W and 0 <= y < H) or pol not in (0, 1):
            raise ParseError(f"event {line!r} outside a {H}x{W} sensor or bad polarity", line=no)
        if last is not None and t < last:
            raise OrderError(f"timestamp {t} decreases (previous {last})", line=no)
        last = t
        rows.append((t, x, y, pol))
    return EventStream.from_rows(rows, H, W)


def save_events(path, ev: EventStream):
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(f"{ev.H},{ev.W}\n")
        for row in zip(ev.t, ev.x, ev.y, ev.pol):
            f.write(",".join(str(int(v)) for v in row) + "\n")


def _accumulate(ev: EventStream, slot, n_slices, keep=None):
    frames = np.zeros((n_slices, 2, ev.H, ev.W))
    if keep is None:
        keep = np.ones(len(ev), dtype=bool)
    np.add.at(frames, (slot[keep], ev.pol[keep], ev.y[keep], ev.x[keep]), 1.0)
    return frames


def slice_equal_count(ev: EventStream, n_slices) -> np.ndarray:
    """[n_slices, 2, H, W] count frames; slice j holds ordinals [jM/n, (j+1)M/n)."""
    if n_slices < 1:
        raise ConfigError("n_slices must be >= 1")
    M = len(ev)
    if M == 0:
        raise EmptyInputError("cannot slice an empty event stream")
    bounds = (np.arange(n_slices + 1) * M) // n_slices
    slot = np.searchsorted(bounds, np.arange(M), side="right") - 1
    return _accumulate(ev, slot, n_slices)


def slice_fixed_duration(ev: EventStream, slice_ms, total_ms) -> np.ndarray:
    """Frames of ``slice_ms`` each covering [0, total_ms) after the first event."""
    if not slice_ms > 0:
        raise ConfigError("slice_ms must be positive")
    n = total_ms / slice_ms
    if not math.isclose(n, round(n)) or round(n) < 1:
        raise ConfigError(f"total_ms={total_ms} is not a multiple of slice_ms={slice_ms}")
    n = int(round(n))
    if len(ev) == 0:
        raise EmptyInputError("cannot slice an empty event stream")
    slice_us = slice_ms * 1000.0
    rel = ev.t - ev.t[0]
    slot = np.floor(rel / slice_us).astype(np.int64)
    return _accumulate(ev, slot, n, keep=slot < n)


# ---------------------------------------------------------------- noise


def _noise_positions(size, nl, rng):
    return rng.choice(size, size=int(math.floor(nl * size)), replace=False)


def inject_salt_pepper(data, spec: NoiseSpec, rng=None):
    """Set floor(nl * numel) random positions to 0 or 1 with equal odds."""
    if spec.kind is not NoiseKind.SALT_PEPPER:
        raise ConfigError("inject_salt_pepper needs a salt_pepper NoiseSpec")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    out = np.array(data, dtype=float, copy=True)
    flat = out.reshape(-1)
    pos = _noise_positions(flat.size, spec.nl, rng)
    flat[pos] = rng.integers(0, 2, size=pos.size).astype(float)
    return out


def inject_uniform_noise(data, spec: NoiseSpec, rng=None):
    """Replace floor(nl * numel) random positions by U[0, 1] draws."""
    if spec.kind is not NoiseKind.UNIFORM:
        raise ConfigError("inject_uniform_noise needs a uniform NoiseSpec")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    out = np.array(data, dtype=float, copy=True)
    flat = out.reshape(-1)
    pos = _noise_positions(flat.size, spec.nl, rng)
    flat[pos] = rng.random(pos.size)
    return out


def corrupt_samples(samples, spec: NoiseSpec):
    """Apply the noise of ``spec`` to every sample separately (one seeded stream)."""
    rng = np.random.default_rng(spec.seed)
    fn = inject_salt_pepper if spec.kind is NoiseKind.SALT_PEPPER else inject_uniform_noise
    return np.stack([fn(s, spec, rng) for s in samples]) if len(samples) else np.array(samples, dtype=float)


# ---------------------------------------------------------------- datasets


def stratified_split(labels, n_train, n_test, seed=0):
    """Disjoint class-balanced index sets of the requested sizes."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    train, test = [], []
    for k, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        a = n_train // len(classes) + (k < n_train % len(classes))
        b = n_test // len(classes) + (k < n_test % len(classes))
        if a + b > idx.size:
            raise ConfigError(f"class {c} has {idx.size} samples, split needs {a + b}")
        train.append(idx[:a])
        test.append(idx[a : a + b])
    return rng.permutation(np.concatenate(train)), rng.permutation(np.concatenate(test))


def synthetic_images(n, classes=10, shape=(1, 8, 8), seed=0, noise=0.15):
    """Class-prototype images in [0, 1]: a fixed random pattern per class plus noise."""
    rng = np.random.default_rng(seed)
    protos = (rng.random((classes,) + tuple(shape)) < 0.3).astype(float) * 0.9
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    pix = protos[labels] + rng.normal(0.0, noise, (n,) + tuple(shape))
    return ImageSet(np.clip(pix, 0.0, 1.0), labels.astype(np.int64))


def synthetic_events(label, classes=4, H=8, W=8, n_events=400, duration_us=100_000, seed=0):
    """Event stream whose activity drifts along a class-specific direction."""
    rng = np.random.default_rng(seed)
    angle = 2 * np.pi * label / classes
    t = np.sort(rng.integers(0, duration_us, n_events))
    phase = t / duration_us
    cx = (W - 1) / 2 + np.cos(angle) * (phase - 0.5) * (W - 1) * 0.8
    cy = (H - 1) / 2 + np.sin(angle) * (phase - 0.5) * (H - 1) * 0.8
    x = np.clip(np.rint(cx + rng.normal(0, 0.7, n_events)), 0, W - 1).astype(np.int64)
    y = np.clip(np.rint(cy + rng.normal(0, 0.7, n_events)), 0, H - 1).astype(np.int64)
    pol = (rng.random(n_events) < 0.5 + 0.4 * np.cos(angle)).astype(np.int64)
    return EventStream(t.astype(np.int64), x, y, pol, H, W)
