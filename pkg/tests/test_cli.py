import os

import pytest
from click.testing import CliRunner

import asr
from asr.cli import cli


@pytest.fixture
def runner():
    return CliRunner()


def test_cli(runner):
    result = runner.invoke(cli, ["--help"])
    assert result.exit_code == 0


@pytest.mark.parametrize(
    "command", ["ingest", "synth", "train", "reconstruct", "gradcheck", "features", "tree", "evaluate", "report"]
)
def test_command_help(runner, command):
    result = runner.invoke(cli, [command, "--help"])
    assert result.exit_code == 0
    assert "Usage" in result.output


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert asr.__version__ in result.output


def test_unknown_option(runner):
    result = runner.invoke(cli, ["train", "--epochs", "3"])
    assert result.exit_code == 1


def test_unknown_log_level(runner):
    result = runner.invoke(cli, ["--log_level", "LOUD", "gradcheck", "--ops", "add", "--instances", "1"])
    assert result.exit_code == 1


def test_gradcheck(runner):
    result = runner.invoke(cli, ["gradcheck", "--ops", "add,sigmoid", "--instances", "2"])
    assert result.exit_code == 0
    assert "sigmoid" in result.output
    assert "FAIL" not in result.output


def test_gradcheck_unknown_op(runner):
    result = runner.invoke(cli, ["gradcheck", "--ops", "softmax"])
    assert result.exit_code == 1


def test_synth(runner, tmp_path):
    out = str(tmp_path / "dataset")
    args = ["synth", "--classes", "2", "--cases", "5", "--patches", "2", "--side", "32", "--out", out]
    result = runner.invoke(cli, args)

    assert result.exit_code == 0
    assert os.path.isfile(os.path.join(out, "manifest.csv"))
    assert os.path.isfile(os.path.join(out, "config.ini"))
    assert "sparse" in result.output


def test_local_config_file(runner, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "asr.ini").write_text("[logging]\nlog_level = INFO\n\n[data]\nsynth_classes = 1\n")

    result = runner.invoke(cli, ["synth", "--cases", "5", "--patches", "1", "--side", "32", "--out", "dataset"])

    assert result.exit_code == 0
    with open(tmp_path / "dataset" / "manifest.csv") as src:
        assert "sparse" not in src.read()


def test_invalid_config_file(runner, tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[training]\nlr = fast\n")
    result = runner.invoke(cli, ["--config_file", str(path), "synth", "--out", str(tmp_path / "d")])
    assert result.exit_code == 1


def test_tree_without_features(runner, tmp_path):
    result = runner.invoke(cli, ["tree", "--features", str(tmp_path)])
    assert result.exit_code == 1


def test_report_without_runs(runner, tmp_path):
    result = runner.invoke(cli, ["report", str(tmp_path)])
    assert result.exit_code == 1
