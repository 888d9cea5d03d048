"""Datasets, the raw_u8 image container and the metrics CSV."""

import csv
import math
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ChecksumMismatch, FormatError

RAW_MAGIC = b"GNDS"
RAW_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")   # magic, version, N, C, W, H


@dataclass
class Dataset:
    """Inputs stored as ``(P, H, W, C)``; vector data has ``H = W = 1``."""

    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"
    stats: Optional[tuple] = None      # per-channel (mean, std) used to normalise

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        if self.inputs.ndim == 2:
            self.inputs = self.inputs[:, None, None, :]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be (P, H, W, C), got {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise ValueError("input and label counts differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def channels(self):
        return self.inputs.shape[-1]

    @property
    def spatial(self):
        return self.inputs.shape[1], self.inputs.shape[2]

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, self.split, self.stats)


# ---------------------------------------------------------------------------
# generators


def gen_toy_binary(n, seed, noise=0.1):
    """Two interleaved half-circles with Gaussian jitter, labels 0 and 1."""
    if n < 4:
        raise ValueError("n must be >= 4")
    rng = np.random.default_rng(seed)
    n1 = n // 2
    n0 = n - n1
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + noise * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2, "train")


def gen_shapes(n, seed, size=8, channels=1, noise=0.05):
    """Small synthetic image task: four stroke patterns at random positions.

    Returns ``(pixels, labels)`` with pixels as uint8 ``(N, C, H, W)`` planes,
    ready for :func:`write_raw_u8`.
    """
    if size < 4:
        raise ValueError("size must be >= 4")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, n)
    imgs = np.zeros((n, size, size))
    for i, lab in enumerate(labels):
        length = int(rng.integers(size // 2, size - 1))
        r, c = rng.integers(0, size - length + 1, 2)
        k = np.arange(length)
        if lab == 0:
            imgs[i, r + length // 2, c + k] = 1.0
        elif lab == 1:
            imgs[i, r + k, c + length // 2] = 1.0
        elif lab == 2:
            imgs[i, r + k, c + k] = 1.0
        else:
            imgs[i, r + k, c + length - 1 - k] = 1.0
    imgs = imgs * rng.uniform(0.6, 1.0, (n, 1, 1)) + noise * rng.standard_normal(imgs.shape)
    pixels = np.clip(np.round(imgs * 255.0), 0, 255).astype(np.uint8)
    pixels = np.repeat(pixels[:, None], channels, axis=1)
    return pixels, labels.astype(np.uint8)


# ---------------------------------------------------------------------------
# raw_u8 container


def encode_raw_u8(pixels, labels):
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise ValueError("pixels must be uint8 with shape (N, C, H, W)")
    if labels.shape != (pixels.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must be one byte per image")
    n, c, h, w = pixels.shape
    body = _HEADER.pack(RAW_MAGIC, RAW_VERSION, n, c, w, h) + pixels.tobytes() \
        + labels.astype(np.uint8).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_raw_u8(path, pixels, labels):
    with open(path, "wb") as fh:
        fh.write(encode_raw_u8(pixels, labels))


def decode_raw_u8(buf):
    """Parse a raw_u8 byte string into ``(pixels (N, C, H, W), labels)``."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, c, w, h = _HEADER.unpack_from(buf, 0)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != RAW_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n_pix = n * c * w * h
    need = _HEADER.size + n_pix + n + 4
    if len(buf) < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need)
    crc_at = need - 4
    (stored,) = struct.unpack_from("<I", buf, crc_at)
    actual = zlib.crc32(buf[:crc_at])
    if stored != actual:
        raise ChecksumMismatch(f"crc32 {actual:#010x} != stored {stored:#010x}")
    pix = np.frombuffer(buf, np.uint8, n_pix, _HEADER.size).reshape(n, c, h, w)
    lab = np.frombuffer(buf, np.uint8, n, _HEADER.size + n_pix)
    return pix.copy(), lab.astype(np.int64)


def read_raw_u8(path):
    with open(path, "rb") as fh:
        return decode_raw_u8(fh.read())


def channel_stats(pixels):
    """Per-channel mean and std of ``[0, 1]``-scaled uint8 planes."""
    x = pixels.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def load_image_dataset(path, kind="raw_u8", stats=None, split="train", classes=None):
    """Load and normalise an image file.

    ``stats`` are the train-split channel statistics; when omitted they are
    computed from this file, which is only right for the train split itself.
    """
    if kind != "raw_u8":
        raise ValueError(f"unknown dataset kind {kind!r}")
    pix, lab = read_raw_u8(path)
    if stats is None:
        stats = channel_stats(pix)
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    x = (pix.astype(np.float64) / 255.0 - mean[None, :, None, None]) / std[None, :, None, None]
    if classes is None:
        classes = int(lab.max()) + 1 if lab.size else 1
    return Dataset(np.transpose(x, (0, 2, 3, 1)), lab, classes, split, (mean, std))


# ---------------------------------------------------------------------------
# metrics


def metric_columns(n_layers):
    return (["epoch", "step", "objective", "train_ll", "train_acc", "eval_ll", "eval_acc"]
            + [f"cond_g_ii_{l}" for l in range(1, n_layers + 1)]
            + ["lr", "wall_seconds", "status"])


_INT_COLS = {"epoch", "step"}


def _render(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    f = float(v)
    if math.isnan(f):
        return "nan"
    if math.isinf(f):
        return "inf" if f > 0 else "-inf"
    return repr(f)


def _parse(col, s):
    if col == "status" or col == "cell" or col == "kl_mode":
        return s
    if col in _INT_COLS:
        return int(s)
    return float(s)


class MetricsWriter:
    """Append-only CSV writer; every row is flushed as soon as it is written."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a", newline="")
        self._w = csv.writer(self._fh)
        if fresh:
            self._w.writerow(self.columns)
            self._fh.flush()

    def write(self, row):
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"metric row lacks {sorted(missing)}")
        self._w.writerow([_render(row[c]) for c in self.columns])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(rows, path, columns):
    with MetricsWriter(path, columns) as w:
        for row in rows:
            w.write(row)


def read_metrics(path):
    """Rows as dicts with ints, floats (``inf``/``nan`` included) and strings."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return [{c: _parse(c, v) for c, v in zip(header, rec)} for rec in reader]
