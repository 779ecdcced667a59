"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"CDNCKPT\\0"
    version    u32
    header     u32 length + UTF-8 JSON (sorted keys)
    nblocks    u32
    block      u32 name length, name, u8 dtype tag, u32 ndim, ndim x u64 dims,
               float64 payload

The header holds the format version, model kind, architecture, task, seed
and training objective, plus any kind-specific construction options.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Architecture, CompoundDensityNetwork

MAGIC = b"CDNCKPT\x00"
FORMAT_VERSION = 1
DTYPE_F64 = 1


class CheckpointError(Exception):
    """Base class for checkpoint failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def build_model(meta: dict, rng=None):
    """Construct an (untrained) model from checkpoint metadata."""
    from .baselines import MLP, Ensemble, VmgMLP

    kind = meta.get("kind")
    try:
        arch = Architecture(**meta["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad architecture in header: {exc}") from exc
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind in ("ml-cdn", "vb-cdn"):
        return CompoundDensityNetwork(
            arch,
            rng,
            bayesian=kind == "vb-cdn",
            sampling=meta.get("sampling", "local"),
            factor_bias=meta.get("factor_bias", 0.0),
            posterior_init=meta.get("posterior_init", 1e-3),
        )
    if kind in ("mcd", "mlp"):
        return MLP(arch, rng, dropout=meta.get("dropout", 0.0))
    if kind == "ensemble":
        return Ensemble(arch, meta["members"], member_seeds=meta["member_seeds"])
    if kind == "vmg":
        return VmgMLP(arch, rng, posterior_init=meta.get("posterior_init", 1e-3))
    raise CheckpointFormatError(f"unknown model kind {kind!r}")


def _encode(model, seed, objective) -> bytes:
    meta = dict(model.metadata())
    meta.update(format_version=FORMAT_VERSION, task=model.task, seed=seed, objective=objective)
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.parameters()
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header]
    out.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<BI", DTYPE_F64, data.ndim)]
        out.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


def save_checkpoint(model, path, seed=None, objective=None) -> None:
    Path(path).write_bytes(_encode(model, seed, objective))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.buf)} while reading {what} (need {n} bytes at {self.pos})")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple:
    """Parse a checkpoint into ``(metadata, {name: array})`` without building a model."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version} not supported (expected {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    try:
        meta = json.loads(r.take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I", "block count")
    blocks = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"block {i} name length")
        name = r.take(nlen, f"block {i} name").decode("utf-8")
        tag, ndim = r.unpack("<BI", f"block {name!r} dtype")
        if tag != DTYPE_F64:
            raise CheckpointFormatError(f"block {name!r}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}Q", f"block {name!r} shape")
        size = 8 * int(np.prod(shape))
        blocks[name] = np.frombuffer(r.take(size, f"block {name!r} payload"), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{len(r.buf) - r.pos} trailing bytes after the last block")
    return meta, blocks


def load_into(model, blocks: dict) -> None:
    """Copy parameter arrays into ``model``; names and shapes must match exactly."""
    params = model.parameters()
    missing = sorted(set(params) - set(blocks))
    extra = sorted(set(blocks) - set(params))
    if missing or extra:
        raise CheckpointShapeError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, value in blocks.items():
        if params[name].data.shape != value.shape:
            raise CheckpointShapeError(f"block {name!r} has shape {value.shape}, model expects {params[name].data.shape}")
    for name, value in blocks.items():
        params[name].data = value.copy()


def load_checkpoint(path, model=None):
    """Load a checkpoint; builds the model from the header unless one is supplied.

    Returns ``(model, metadata)``.
    """
    meta, blocks = read_checkpoint(path)
    if model is None:
        model = build_model(meta)
    load_into(model, blocks)
    return model, meta
