"""Embedding datasets: synthetic biased embeddings, binary/CSV I/O, and batching.

Binary layout (little-endian)::

    b"FLE1"                    magic
    u32                        format version (1)
    u64 n, u32 d, u32 a        rows, width, number of sensitive attributes
    f32[n*d]                   embeddings, row-major
    u8[n]                      labels
    u8[n] * a                  one block per sensitive attribute
    u8[n]                      split tags (0 train, 1 val, 2 test)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import joint_group

__all__ = [
    "FormatError",
    "ConfigError",
    "SPLITS",
    "EmbeddingDataset",
    "SynthConfig",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "read_csv",
    "batches",
]

MAGIC = b"FLE1"
VERSION = 1
SPLITS = {"train": 0, "val": 1, "test": 2}
_HEADER = struct.Struct("<4sIQII")


class FormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class ConfigError(ValueError):
    pass


@dataclass(eq=False)
class EmbeddingDataset:
    e: np.ndarray  # (n, d) float32
    y: np.ndarray  # (n,) uint8
    s: np.ndarray  # (n, a) uint8
    split: np.ndarray  # (n,) uint8

    def __post_init__(self):
        self.e = np.ascontiguousarray(self.e, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.uint8).ravel()
        s = np.asarray(self.s, dtype=np.uint8)
        self.s = s.reshape(-1, 1) if s.ndim == 1 else s
        self.split = np.asarray(self.split, dtype=np.uint8).ravel()
        self.validate()

    def validate(self) -> None:
        n = self.e.shape[0]
        if self.e.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        if not (self.y.size == self.s.shape[0] == self.split.size == n):
            raise ValueError("field lengths disagree")
        if not np.isfinite(self.e).all():
            raise ValueError("embeddings contain NaN or Inf")
        if self.split.size and self.split.max() > 2:
            raise ValueError("split tags must be 0, 1 or 2")

    @property
    def n(self) -> int:
        return self.e.shape[0]

    @property
    def d(self) -> int:
        return self.e.shape[1]

    @property
    def attr_count(self) -> int:
        return self.s.shape[1]

    @property
    def group(self) -> np.ndarray:
        """Joint sensitive-group index per row."""
        return joint_group(self.s)

    @property
    def n_groups(self) -> int:
        return 2 ** self.attr_count

    @property
    def n_labels(self) -> int:
        return int(self.y.max()) + 1 if self.n else 0

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS[split])

    def subset(self, split: str) -> "EmbeddingDataset":
        idx = self.indices(split)
        return EmbeddingDataset(self.e[idx], self.y[idx], self.s[idx], self.split[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in ((self.e, other.e), (self.y, other.y), (self.s, other.s), (self.split, other.split))
        )


@dataclass
class SynthConfig:
    """Synthetic stand-in for a frozen encoder's latents.

    Each row draws a balanced label ``y`` and ``attr_count`` binary
    attributes, each equal to ``y`` with probability ``(1 + rho) / 2`` (so
    ``corr(y, s_k) = rho``). The source vector holds one-hot codes of ``y``
    and each attribute scaled by their signal strengths, with Gaussian noise
    of scale ``sigma`` on every coordinate; a seeded well-conditioned linear
    map and the monotone warp ``h + 0.5 tanh(h)`` produce the embedding.
    """

    n: int = 8192
    d: int = 16
    label_signal: float = 0.75
    attr_signal: float = 0.75
    rho: float = 0.8
    sigma: float = 0.5
    attr_count: int = 1
    map_seed: int = 1234
    seed: int = 7
    val_frac: float = 0.1
    test_frac: float = 0.2

    def validate(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.d < 4 or self.d < 2 + 2 * self.attr_count:
            raise ConfigError(f"d={self.d} too small for {self.attr_count} attribute(s)")
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if self.attr_count < 1:
            raise ConfigError("need at least one sensitive attribute")
        if self.val_frac < 0 or self.test_frac < 0 or self.val_frac + self.test_frac >= 1:
            raise ConfigError("invalid split fractions")


def _mixing_matrix(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
    q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    # singular values in [0.5, 2]: condition number at most 4
    return q1 @ np.diag(np.geomspace(0.5, 2.0, d)) @ q2


def generate_synthetic(cfg: SynthConfig) -> EmbeddingDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n, cfg.d
    y = rng.integers(0, 2, n)
    agree = rng.random((n, cfg.attr_count)) < (1 + cfg.rho) / 2
    s = np.where(agree, y[:, None], 1 - y[:, None])
    u = cfg.sigma * rng.standard_normal((n, d))
    rows = np.arange(n)
    u[rows, y] += cfg.label_signal
    for k in range(cfg.attr_count):
        u[rows, 2 + 2 * k + s[:, k]] += cfg.attr_signal
    h = u @ _mixing_matrix(d, cfg.map_seed).T
    e = h + 0.5 * np.tanh(h)
    r = rng.random(n)
    split = np.where(r < cfg.test_frac, 2, np.where(r < cfg.test_frac + cfg.val_frac, 1, 0))
    return EmbeddingDataset(e, y, s, split)


# ---------------------------------------------------------------- binary I/O
def save_dataset(ds: EmbeddingDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def to_bytes(ds: EmbeddingDataset) -> bytes:
    parts = [
        _HEADER.pack(MAGIC, VERSION, ds.n, ds.d, ds.attr_count),
        ds.e.astype("<f4").tobytes(),
        ds.y.tobytes(),
    ]
    parts.extend(np.ascontiguousarray(ds.s[:, k]).tobytes() for k in range(ds.attr_count))
    parts.append(ds.split.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> EmbeddingDataset:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, d, a = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    expected = off + 4 * n * d + n + a * n + n
    if len(buf) < expected:
        raise FormatError(f"truncated body: need {expected} bytes, have {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError("trailing bytes after dataset", expected)
    e = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += 4 * n * d
    y = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    off += n
    s = np.stack(
        [np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + k * n) for k in range(a)], axis=1
    ) if a else np.zeros((n, 0), dtype=np.uint8)
    off += a * n
    split = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    if split.size and split.max() > 2:
        raise FormatError("split tag out of range", off + int(np.argmax(split > 2)))
    try:
        return EmbeddingDataset(e.copy(), y.copy(), s.copy(), split.copy())
    except ValueError as exc:
        raise FormatError(str(exc), _HEADER.size) from None


def load_dataset(path) -> EmbeddingDataset:
    return from_bytes(Path(path).read_bytes())


def read_csv(path) -> EmbeddingDataset:
    """Import ``e0..e{d-1},y,s0[,s1...][,split]`` rows; rows without a split column are train."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        e_cols = [c for c in header if c.startswith("e") and c[1:].isdigit()]
        s_cols = [c for c in header if c.startswith("s") and c[1:].isdigit()]
        if "s" in header and not s_cols:
            s_cols = ["s"]
        e_cols.sort(key=lambda c: int(c[1:]))
        s_cols.sort(key=lambda c: int(c[1:]) if c[1:] else 0)
        if not e_cols or "y" not in header or not s_cols:
            raise FormatError("CSV header needs e0..e{d-1}, y and s0 columns")
        if [int(c[1:]) for c in e_cols] != list(range(len(e_cols))):
            raise FormatError("embedding columns must be e0..e{d-1} without gaps")
        E, Y, S, SP = [], [], [], []
        for row in reader:
            E.append([float(row[c]) for c in e_cols])
            Y.append(int(row["y"]))
            S.append([int(row[c]) for c in s_cols])
            tag = row.get("split")
            SP.append(SPLITS[tag] if tag in SPLITS else int(tag) if tag else 0)
    return EmbeddingDataset(np.array(E, dtype=np.float32).reshape(-1, len(e_cols)),
                            np.array(Y), np.array(S).reshape(-1, len(s_cols)), np.array(SP))


# ---------------------------------------------------------------- batching
def batches(n_or_indices, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch shuffle split into batches.

    A trailing short batch is kept when it has at least two rows and dropped
    otherwise, since batch covariances need two samples.
    """
    if isinstance(n_or_indices, (int, np.integer)):
        idx = np.arange(int(n_or_indices))
    else:
        idx = np.asarray(n_or_indices)
    rng = np.random.default_rng([seed, epoch])
    order = idx[rng.permutation(idx.size)]
    out = [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
    if out and out[-1].size < 2:
        out.pop()
    return out
