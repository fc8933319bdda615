import logging.config
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

import mammodcn
from mammodcn.cli import main
from mammodcn.weights import load_model

from .util import tiny_run_config, write_toml


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    # Drop the handlers bound to the runner's streams and the temporary outdir.
    logging.config.dictConfig(
        {"version": 1, "disable_existing_loggers": False, "root": {"handlers": []}}
    )


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    return write_toml(tmp_path / "run.toml", tiny_run_config(tmp_path / "out"))


def _invoke(config_path: Path, *args: str):
    return CliRunner().invoke(main, ["--config", str(config_path), *args])


def test_version():
    result = CliRunner().invoke(main, ["--version"])
    assert result.exit_code == 0
    assert mammodcn.__version__ in result.output


def test_pipeline_end_to_end(config_path: Path):
    outdir = config_path.parent / "out"
    for command in (["gen-data"], ["train"], ["infer"], ["evaluate"]):
        result = _invoke(config_path, *command)
        assert result.exit_code == 0, result.output

    assert (outdir / "data" / "index.feather").exists()
    assert len(list((outdir / "data" / "images").glob("*.pgm"))) == 4 * (2 + 10)
    assert len(load_model(outdir / "model.weights")) > 0
    log = pd.read_csv(outdir / "train_log.csv")
    assert len(log) == 8
    scores = pd.read_csv(outdir / "scores.csv")
    assert len(scores) == 10 * 4 * 8
    assert len(pd.read_csv(outdir / "scores_noaug.csv")) == 10 * 4
    assert scores["score"].between(0.0, 1.0).all()

    report = pd.read_csv(outdir / "auc.csv")
    assert list(report["level"]) == ["breast-wise", "subject-wise"] * 2
    assert report["auc"].between(0.0, 1.0).all()
    for level in ("breast", "subject"):
        assert f"{level}-wise AUC (augmented): " in result.output
        assert f"{level}-wise AUC (no augmentation): " in result.output
        assert (outdir / f"roc_{level}wise.csv").exists()
        assert (outdir / f"roc_{level}wise_noaug.csv").exists()

    result = _invoke(config_path, "plot", "roc")
    assert result.exit_code == 0, result.output
    assert (outdir / "plots" / "roc" / "subjectwise.png").exists()
    result = _invoke(
        config_path, "plot", "samples", "--split", "test", "--n-exams", "2"
    )
    assert result.exit_code == 0, result.output
    assert len(list((outdir / "plots" / "samples").glob("*.png"))) == 2


def test_overrides_reach_the_commands(config_path: Path):
    result = _invoke(config_path, "--set", "phantom.test_exams=3", "gen-data")
    assert result.exit_code == 0, result.output
    index = pd.read_feather(config_path.parent / "out" / "data" / "index.feather")
    assert (index["split"] == "test").sum() == 3 * 4


def test_memplan(config_path: Path):
    result = _invoke(config_path, "memplan")
    assert result.exit_code == 0, result.output
    assert "activation_MiB" in result.output
    assert "Largest feasible side (configured, budget 67,108,864 bytes): " in (
        result.output
    )
    assert "Largest feasible side (doubled repeats" in result.output
    table = pd.read_csv(config_path.parent / "out" / "memplan.csv")
    assert list(table["side"]) == [512, 1024]
    assert table["activation_bytes"].iloc[1] == 4 * table["activation_bytes"].iloc[0]


def test_gradcheck_without_the_model(config_path: Path):
    result = _invoke(config_path, "gradcheck", "--no-model")
    assert result.exit_code == 0, result.output
    assert result.output.strip().endswith("PASS")
    assert "max_rel_error" in result.output


def test_missing_inputs_are_reported(config_path: Path):
    result = _invoke(config_path, "train")
    assert result.exit_code == 1
    assert "MissingInput" in result.output
    assert "gen-data" in result.output


def test_bad_config_is_reported_on_one_line(tmp_path: Path):
    obj = tiny_run_config(tmp_path / "out")
    obj["train"]["learning_rat"] = 0.1
    path = write_toml(tmp_path / "run.toml", obj)
    result = _invoke(path, "memplan")
    assert result.exit_code == 1
    lines = [line for line in result.output.splitlines() if line.strip()]
    assert len(lines) == 1
    assert lines[0].startswith("Error: BadConfig: train")
    assert "learning_rat" in lines[0]


def test_corrupt_model_is_reported(config_path: Path):
    assert _invoke(config_path, "gen-data").exit_code == 0
    (config_path.parent / "out" / "model.weights").write_bytes(b"NOTMAGIC" + bytes(8))
    result = _invoke(config_path, "infer")
    assert result.exit_code == 1
    assert "BadMagic" in result.output
