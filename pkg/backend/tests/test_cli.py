import pytest

from app import cli, pipeline
from app.errors import NumericalError
from app.repository import RunPaths, read_csv


def test_pretrain_and_eval_exit_zero(tmp_path, tiny_config_path, capsys):
    out = tmp_path / "pre"
    assert cli.main(["pretrain", "--config", str(tiny_config_path), "--out", str(out), "--seed", "5"]) == 0
    assert capsys.readouterr().out.strip() == str(out)
    assert cli.main(["eval", "--config", str(tiny_config_path), "--out", str(out), "--seed", "5"]) == 0
    assert read_csv(RunPaths(out).metrics / "report.csv")[0]["seed"] == "5"

    summary = tmp_path / "summary.csv"
    assert cli.main(["report", str(out), "--out", str(summary)]) == 0
    assert read_csv(summary)[0]["method"] == "baseline"


def test_missing_artifacts_exit_one(tmp_path, tiny_config_path, capsys):
    code = cli.main(["finetune", "--config", str(tiny_config_path), "--out", str(tmp_path / "ft"),
                     "--pretrained", str(tmp_path / "nowhere")])
    assert code == 1
    assert "Missing artifact" in capsys.readouterr().err


def test_bad_config_exits_one(tmp_path):
    assert cli.main(["pretrain", "--config", str(tmp_path / "missing.ini")]) == 1
    assert cli.main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "s.csv")]) == 1


def test_numerical_abort_exits_two(tmp_path, tiny_config_path, monkeypatch, capsys):
    def diverge(config):
        raise NumericalError("loss went non-finite")

    monkeypatch.setitem(pipeline.STAGES, "pretrain", diverge)
    assert cli.main(["pretrain", "--config", str(tiny_config_path), "--out", str(tmp_path / "x")]) == 2
    assert "aborted" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["pretrain", "--bogus"], ["finetune", "--method", "sft"], []])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1
