"""Datasets: cubic toy regression and IDX image files (MNIST family)."""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "all"
    source: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("dataset inputs must be finite")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx], split=split or self.split)


# ---------------------------------------------------------------------------
# toy regression


@dataclass
class ToySpec:
    variant: str = "homoscedastic"
    n: Optional[int] = None
    low: float = -4.0
    high: float = 4.0
    seed: int = 0
    noise: bool = True

    def noise_std(self, x: np.ndarray) -> np.ndarray:
        if self.variant == "homoscedastic":
            return np.full_like(x, 3.0)
        if self.variant == "heteroscedastic":
            return np.where(x >= 0, 3.0, 15.0)
        raise ValueError(f"unknown toy variant {self.variant!r}")

    @property
    def size(self) -> int:
        if self.n is not None:
            return int(self.n)
        return 20 if self.variant == "homoscedastic" else 100


def gen_toy(spec: ToySpec) -> Dataset:
    """``y = x^3 + eps`` with ``x ~ U[low, high]``.

    Homoscedastic: 20 points, ``eps ~ N(0, 3^2)``.  Heteroscedastic: 100
    points, ``eps ~ N(0, 3^2)`` for ``x >= 0`` and ``N(0, 15^2)`` otherwise.
    """
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(spec.low, spec.high, size=spec.size)
    eps = rng.standard_normal(spec.size) * spec.noise_std(x)
    y = x**3 + (eps if spec.noise else 0.0)
    return Dataset(x[:, None], y[:, None], source=f"toy:{spec.variant}")


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head != b"\x1f\x8b":
        return path.read_bytes()
    try:
        with gzip.open(path, "rb") as f:
            return f.read()
    except EOFError as exc:
        raise IdxTruncatedError(f"{path}: gzip stream ends early ({exc})") from exc
    except (gzip.BadGzipFile, zlib.error) as exc:
        raise IdxError(f"{path}: corrupt gzip stream ({exc})") from exc


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise IdxTruncatedError(f"{what}: file ends at byte {len(buf)} before the magic number")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IdxMagicError(f"{what}: magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    if len(buf) < header:
        raise IdxTruncatedError(f"{what}: header needs {header} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise IdxTruncatedError(
            f"{what}: payload truncated at byte {len(buf)}, expected {header + size} bytes for dims {dims}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "all") -> Dataset:
    """Read an IDX image/label pair (gzip handled transparently).

    Pixels are scaled to ``[0, 1]`` and images flattened to ``N x (rows*cols)``.
    """
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, f"images {images_path}")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, f"labels {labels_path}")
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{len(images)} images (count field at byte 4 of {images_path}) but "
            f"{len(labels)} labels (count field at byte 4 of {labels_path})"
        )
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), split=split, source=str(images_path))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (N, rows, cols), got {images.shape}")
    opener = gzip.open if str(images_path).endswith(".gz") else open
    with opener(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    opener = gzip.open if str(labels_path).endswith(".gz") else open
    with opener(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# splits and minibatches


def split(dataset: Dataset, fraction: float, seed: int) -> tuple:
    """Shuffled ``(train, validation)`` split with ``round(fraction * N)`` held out."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        raise ValueError(f"fraction {fraction} of {n} examples leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_val:]), "train"), dataset.subset(np.sort(perm[:n_val]), "validation")


def batches(dataset: Dataset, size: int, seed: int) -> Iterator[tuple]:
    """Endless stream of ``(x, y)`` minibatches, reshuffled every epoch.

    The last batch of an epoch may be short.
    """
    n = len(dataset)
    if not 1 <= size <= n:
        raise ValueError(f"batch size must lie in [1, {n}], got {size}")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, size):
            idx = perm[start : start + size]
            yield dataset.inputs[idx], dataset.targets[idx]
