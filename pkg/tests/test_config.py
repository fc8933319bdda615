from pathlib import Path

import pydantic
import pytest

from mammodcn.config import (
    Config,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    load_config,
    save_config,
)
from mammodcn.errors import BadConfig

from .util import tiny_run_config, write_toml


def test_defaults_are_consistent():
    conf = Config()
    assert conf.model.total_stride == 16
    assert conf.model.anchors.stride == 16
    assert conf.phantom.side % conf.model.total_stride == 0


def test_load_tiny_config(tmp_path: Path):
    path = write_toml(tmp_path / "run.toml", tiny_run_config(tmp_path / "out"))
    conf = load_config(path)
    assert conf.phantom.side == 32
    assert conf.model.total_stride == 4
    assert conf.train.epochs == 1
    assert conf.general.outdir == tmp_path / "out"


def test_save_and_load_give_the_same_config(tmp_path: Path):
    conf = load_config(
        write_toml(tmp_path / "run.toml", tiny_run_config(tmp_path / "out"))
    )
    save_config(conf, tmp_path / "saved.toml")
    assert load_config(tmp_path / "saved.toml") == conf


@pytest.mark.parametrize(
    "section,key,value",
    [
        ("train", "learning_rat", 0.1),  # misspelled key
        ("phantom", "prevalence", 1.5),
        ("train", "learning_rate", 0.0),
        ("schema_version", None, 2),
        ("phantom", "side", 30),  # not divisible by the stride
    ],
)
def test_invalid_configs_rejected(tmp_path: Path, section, key, value):
    obj = tiny_run_config(tmp_path / "out")
    if key is None:
        obj[section] = value
    else:
        obj[section][key] = value
    with pytest.raises(pydantic.ValidationError):
        load_config(write_toml(tmp_path / "run.toml", obj))


def test_anchor_stride_must_match_the_backbone():
    with pytest.raises(pydantic.ValidationError):
        ModelConfig(anchors={"stride": 8})


def test_overrides(tmp_path: Path):
    path = write_toml(tmp_path / "run.toml", tiny_run_config(tmp_path / "out"))
    conf = load_config(
        path, ["train.epochs=3", "train.augment=true", "general.outdir=elsewhere"]
    )
    assert conf.train.epochs == 3
    assert conf.train.augment is True
    assert conf.general.outdir == Path("elsewhere")


def test_override_syntax():
    merged = apply_overrides({"a": {"b": 1}}, ["a.c=[1, 2]"])
    assert merged == {"a": {"b": 1, "c": [1, 2]}}
    assert apply_overrides({}, ["x=word"]) == {"x": "word"}
    with pytest.raises(BadConfig):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(BadConfig):
        apply_overrides({"a": 1}, ["a.b=2"])


def test_zero_learning_rate_only_by_copy():
    with pytest.raises(pydantic.ValidationError):
        TrainConfig(learning_rate=0.0)
    assert TrainConfig().copy(update={"learning_rate": 0.0}).learning_rate == 0.0
