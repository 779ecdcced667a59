import json
import struct

import numpy as np
import pytest

from cdn.baselines import MLP, Ensemble, VmgMLP
from cdn.checkpoint import (
    MAGIC,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from cdn.model import Architecture, CompoundDensityNetwork

ARCH = Architecture([3, 5, 2], hyper_hidden=[4])


def models():
    rng = np.random.default_rng(0)
    return [
        CompoundDensityNetwork(ARCH, rng),
        CompoundDensityNetwork(ARCH, rng, bayesian=True, sampling="weights"),
        MLP(ARCH, rng, dropout=0.5),
        Ensemble(ARCH, 2, seed=3),
        VmgMLP(ARCH, rng),
    ]


@pytest.mark.parametrize("model", models(), ids=lambda m: m.kind)
def test_round_trip_is_bit_exact(tmp_path, model):
    for t in model.parameters().values():
        t.data = t.data + np.random.default_rng(1).normal(size=t.data.shape)
    save_checkpoint(model, tmp_path / "m.ckpt", seed=42, objective="ml")
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert type(loaded) is type(model)
    assert meta["kind"] == model.kind and meta["seed"] == 42 and meta["objective"] == "ml"
    assert meta["format_version"] == 1 and meta["task"] == "classification"
    for k, v in model.parameters().items():
        assert loaded.parameters()[k].data.tobytes() == v.data.tobytes()
    # save again from the loaded copy: identical bytes
    save_checkpoint(loaded, tmp_path / "again.ckpt", seed=42, objective="ml")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_special_values_survive(tmp_path):
    m = MLP(ARCH)
    m.params["layer1.weight"].data[0, :3] = [-0.0, 1e-300, np.finfo(float).max]
    save_checkpoint(m, tmp_path / "m.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.params["layer1.weight"].data.tobytes() == m.params["layer1.weight"].data.tobytes()


def test_header_is_json(tmp_path):
    save_checkpoint(MLP(ARCH), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack_from("<I", raw, 12)
    meta = json.loads(raw[16 : 16 + n])
    assert meta["architecture"]["layer_sizes"] == [3, 5, 2]


def test_corrupt_magic(tmp_path):
    save_checkpoint(MLP(ARCH), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_version_mismatch(tmp_path):
    save_checkpoint(MLP(ARCH), tmp_path / "m.ckpt")
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    (tmp_path / "m.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(tmp_path / "m.ckpt")


@pytest.mark.parametrize("cut", [4, 20, 200, 1])
def test_truncated(tmp_path, cut):
    save_checkpoint(MLP(ARCH), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw[: len(raw) - cut] if cut > 4 else raw[:cut])
    with pytest.raises(CheckpointTruncatedError):
        read_checkpoint(tmp_path / "m.ckpt")


def test_wrong_architecture_names_block(tmp_path):
    save_checkpoint(MLP(ARCH), tmp_path / "m.ckpt")
    other = MLP(Architecture([3, 7, 2]))
    with pytest.raises(CheckpointShapeError, match="layer1.weight"):
        load_checkpoint(tmp_path / "m.ckpt", model=other)


def test_missing_block(tmp_path):
    save_checkpoint(MLP(ARCH), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointShapeError, match="missing"):
        load_checkpoint(tmp_path / "m.ckpt", model=MLP(Architecture([3, 5, 5, 2])))


def test_error_kinds_are_distinct():
    kinds = {CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError, CheckpointShapeError}
    assert len(kinds) == 4
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)
