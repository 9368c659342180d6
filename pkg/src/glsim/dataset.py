"""Dataset container, GLDS binary file format, and the synthetic generator.

GLDS layout (little-endian): magic "GLDS", u32 version, u32 count, u32 dim,
u32 classes, count*dim float64 features row-major, count u32 labels. Total
file length is 20 + 8*count*dim + 4*count bytes.

Synthetic data are class-conditioned smooth random fields in [0, 1], rendered
as bright blobs on a dark background: each class owns a smoothed template,
each sample mixes it with its own smoothed detail field, and the mix is
thresholded and brightness-scaled. The dark background keeps the batch mean
small while per-sample blob layout varies a lot, which is what gives
individual samples distinguishable first-layer projections.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .errors import InputError
from .rng import RngStream

MAGIC = b"GLDS"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


@dataclass
class Dataset:
    inputs: np.ndarray  # count x dim, float64 in [0, 1]
    labels: np.ndarray  # count, int64 in [0, classes)
    classes: int

    def __post_init__(self) -> None:
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise InputError("dataset inputs must be count x dim")
        if self.labels.shape != (self.inputs.shape[0],):
            raise InputError("one label per dataset row required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InputError(f"labels must lie in [0, {self.classes})")

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def dataset_to_bytes(ds: Dataset) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, ds.count, ds.dim, ds.classes)
    body = ds.inputs.astype("<f8").tobytes(order="C")
    tail = ds.labels.astype("<u4").tobytes()
    return head + body + tail


def dataset_from_bytes(raw: bytes) -> Dataset:
    if len(raw) < HEADER.size:
        raise InputError("dataset file truncated before header")
    magic, version, count, dim, classes = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InputError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise InputError(f"unsupported dataset version {version}")
    expected = HEADER.size + 8 * count * dim + 4 * count
    if len(raw) != expected:
        raise InputError(f"dataset length {len(raw)} != expected {expected} bytes")
    inputs = np.frombuffer(raw, dtype="<f8", count=count * dim, offset=HEADER.size)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=HEADER.size + 8 * count * dim)
    inputs = inputs.reshape(count, dim).astype(np.float64)
    if count and not np.isfinite(inputs).all():
        raise InputError("dataset contains non-finite values")
    return Dataset(inputs, labels.astype(np.int64), classes)


def write_dataset(path: str | Path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


def _field_shape(dim: int) -> tuple[int, ...]:
    """Interpret a flat feature dim as (h, w, 3), (h, w), or a 1-D field."""
    if dim % 3 == 0:
        side = int(round(np.sqrt(dim / 3)))
        if 3 * side * side == dim and side >= 2:
            return (side, side, 3)
    side = int(round(np.sqrt(dim)))
    if side * side == dim and side >= 2:
        return (side, side)
    return (dim,)


def _smooth_unit_field(gen: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    """Smoothed white noise rescaled to span [0, 1]."""
    noise = gen.standard_normal(shape)
    if len(shape) == 1:
        field = gaussian_filter1d(noise, sigma=max(sigma, 1.0), mode="wrap")
    else:
        sigmas = [sigma, sigma] + [0.0] * (len(shape) - 2)
        field = gaussian_filter(noise, sigma=sigmas, mode="wrap")
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros(shape)
    return (field - lo) / (hi - lo)


def generate_synthetic(dim: int, classes: int, count: int, seed: int) -> Dataset:
    """Reproducible class-conditioned sparse fields; labels balanced within 1."""
    if dim < 1 or classes < 1 or count < 0:
        raise InputError("dim and classes must be >= 1 and count >= 0")
    stream = RngStream(seed).child("synthetic", dim, classes, count)
    shape = _field_shape(dim)
    extent = shape[0]

    gen_t = stream.child("templates").generator()
    templates = np.stack(
        [_smooth_unit_field(gen_t, shape, sigma=extent / 5.0) for _ in range(classes)]
    )

    labels = np.arange(count, dtype=np.int64) % classes
    labels = labels[stream.child("labels").generator().permutation(count)]

    gen_s = stream.child("samples").generator()
    rows = np.empty((count, dim))
    for i in range(count):
        detail = _smooth_unit_field(gen_s, shape, sigma=max(extent / 20.0, 0.8))
        brightness = gen_s.uniform(0.55, 1.0)
        field = 0.45 * templates[labels[i]] + 0.55 * detail
        rows[i] = np.clip((field - 0.62) * 3.2 * brightness, 0.0, 1.0).ravel()
    return Dataset(rows, labels, classes)
