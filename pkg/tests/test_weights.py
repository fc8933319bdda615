from pathlib import Path

import numpy as np
import pytest

from mammodcn.errors import BadMagic, ModelFileError, TruncatedFile, UnsupportedVersion
from mammodcn.network import Network
from mammodcn.weights import (
    MAGIC,
    ModelParams,
    deserialize,
    load_model,
    save_model,
    serialize,
)

from .util import tiny_model_config


def _params() -> ModelParams:
    rng = np.random.default_rng(0)
    return ModelParams(
        {
            "a.weight": rng.normal(size=(2, 3, 1, 1)),
            "a.bias": np.array([np.pi, -0.0]),
            "b.norm.running_mean": np.zeros(2),
            "scalar": np.float64(1e-300),
        }
    )


def test_serialization_is_bit_exact():
    params = _params()
    back = deserialize(serialize(params))
    assert back.bit_equal(params)
    assert list(back) == list(params)
    assert back["scalar"].shape == ()


def test_model_file_roundtrip(tmp_path: Path):
    params = Network.initialize(tiny_model_config()).params
    path = tmp_path / "model.weights"
    save_model(params, path)
    assert load_model(path).bit_equal(params)
    assert path.read_bytes()[: len(MAGIC)] == MAGIC


def test_truncated_file_names_the_offset():
    data = serialize(_params())
    with pytest.raises(TruncatedFile) as info:
        deserialize(data[:-3])
    assert info.value.offset < len(data)
    assert f"offset {info.value.offset}" in str(info.value)
    with pytest.raises(TruncatedFile):
        deserialize(data[:4])


def test_header_checks():
    data = serialize(_params())
    with pytest.raises(BadMagic):
        deserialize(b"X" + data[1:])
    bumped = data[: len(MAGIC)] + (99).to_bytes(4, "little") + data[len(MAGIC) + 4 :]
    with pytest.raises(UnsupportedVersion):
        deserialize(bumped)
    with pytest.raises(ModelFileError):
        deserialize(data + b"\x00")


def test_unknown_parameter_names():
    params = _params()
    with pytest.raises(KeyError, match="no.such.weight"):
        params["no.such.weight"]
    with pytest.raises(KeyError):
        del params["no.such.weight"]


def test_learnable_names_skip_buffers():
    params = _params()
    assert params.learnable_names() == ["a.weight", "a.bias", "scalar"]
    assert set(params.zero_grads()) == {"a.weight", "a.bias", "scalar"}
    assert params.size == 6 + 2 + 2 + 1


def test_copies_are_independent():
    params = _params()
    copy = params.copy()
    copy["a.bias"][0] = 0.0
    assert params["a.bias"][0] == np.pi
    assert not copy.bit_equal(params)
