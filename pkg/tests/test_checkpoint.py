"""Checkpoint round-trips and corruption handling."""

import numpy as np
import pytest

from m3em.binio import (
    FormatError,
    MagicMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from m3em.checkpoint import load_params, save_params
from m3em.model import ModelDims, init_params


def make_params(seed=0):
    dims = ModelDims(rgb_channels=4, flow_channels=4, audio_channels=4,
                     height=4, width=4, verb_classes=3, noun_classes=4)
    return init_params(dims, bottleneck_ratio=2, pyramid_levels=1, seed=seed)


def test_roundtrip_is_bit_exact(tmp_path):
    params = make_params(seed=1)
    path = tmp_path / "model.m3em"
    save_params(path, params)
    restored = load_params(path, make_params(seed=99))
    for name, tensor in params.named().items():
        assert np.array_equal(tensor.data, restored.named()[name].data), name


def test_save_is_deterministic(tmp_path):
    params = make_params(seed=2)
    p1, p2 = tmp_path / "a.m3em", tmp_path / "b.m3em"
    save_params(p1, params)
    save_params(p2, params)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "model.m3em"
    save_params(path, make_params())
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(MagicMismatchError):
        load_params(path, make_params())


def test_bad_version(tmp_path):
    path = tmp_path / "model.m3em"
    save_params(path, make_params())
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_params(path, make_params())


def test_truncated_payload(tmp_path):
    path = tmp_path / "model.m3em"
    save_params(path, make_params())
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 17])
    with pytest.raises(TruncatedFileError):
        load_params(path, make_params())


def test_shape_mismatch_against_config(tmp_path):
    path = tmp_path / "model.m3em"
    save_params(path, make_params())
    dims = ModelDims(rgb_channels=8, flow_channels=8, audio_channels=8,
                     height=4, width=4, verb_classes=3, noun_classes=4)
    other = init_params(dims, bottleneck_ratio=2, pyramid_levels=1, seed=0)
    with pytest.raises(FormatError):
        load_params(path, other)
