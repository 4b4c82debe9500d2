import numpy as np
import pytest

from app import pipeline, repository
from app.config import load_run_config
from app.errors import ConfigError
from app.repository import RunPaths, read_csv, read_manifest, read_samples_csv


def _pretrained(tmp_path, config_path, name="pre"):
    cfg = load_run_config(config_path, out_dir=str(tmp_path / name))
    pipeline.run_pipeline(cfg, "pretrain")
    return cfg, RunPaths(tmp_path / name)


def test_pretrain_writes_artifacts(tmp_path, tiny_config_path):
    cfg, paths = _pretrained(tmp_path, tiny_config_path)
    for path in (paths.denoiser, paths.embedder, paths.config, paths.logs / "pretrain.csv"):
        assert path.exists()
    assert not paths.finetuned.exists()
    manifest = read_manifest(paths.manifest)
    assert manifest["stage_pretrain"] == "done"
    assert manifest["config_hash"] == cfg.config_hash()
    assert load_run_config(paths.config).config_hash() == cfg.config_hash()
    losses = [float(r["loss"]) for r in read_csv(paths.logs / "pretrain.csv")]
    assert losses[-1] < losses[0]
    assert [r["stage"] for r in repository.get_run(pipeline.run_id_for(cfg))] == ["pretrain"]


def test_full_pipeline(tmp_path, tiny_config_path):
    pre_cfg, pre = _pretrained(tmp_path, tiny_config_path)
    base_eval = pipeline.run_pipeline(pre_cfg, "eval")
    base_report = read_csv(pre.metrics / "report.csv")[0]
    assert base_report["method"] == "baseline"
    assert 1.0 <= float(base_report["vendi_raw"]) <= 60.0
    assert 1.0 <= float(base_report["is_score"]) <= 8.0
    assert 0 <= int(base_report["mode_coverage"]) <= 8
    assert base_eval.metrics["mean_reward"] == pytest.approx(float(base_report["mean_reward"]))

    ft_cfg = load_run_config(tiny_config_path, out_dir=str(tmp_path / "ft"), pretrained_dir=str(pre.root))
    ft = RunPaths(tmp_path / "ft")
    result = pipeline.run_pipeline(ft_cfg, "finetune")
    assert np.isfinite(result.metrics["final_mean_reward"])
    rows = read_csv(ft.logs / "train.csv")
    assert [(int(r["window_lo"]), int(r["window_hi"])) for r in rows] == [(2, 4), (6, 8)]
    assert len(read_csv(ft.checkpoints / "train" / "manifest.csv")) == 3
    assert ft.finetuned.exists() and ft.embedder.exists()
    assert not (ft.logs / "selection.csv").exists()

    pipeline.run_pipeline(ft_cfg, "eval")
    assert read_csv(ft.metrics / "report.csv")[0]["method"] == "hrf"
    assert read_samples_csv(ft.samples / "eval.csv").shape == (60, 2)

    pipeline.run_pipeline(ft_cfg, "vendi-curve")
    assert [int(r["n"]) for r in read_csv(ft.metrics / "vendi_curve.csv")] == [10, 20, 30, 40, 50, 60]

    inject = pipeline.run_pipeline(ft_cfg, "inject")
    assert np.isnan(inject.metrics["spearman"]) or -1.0 <= inject.metrics["spearman"] <= 1.0
    assert [int(r["injection_step"]) for r in read_csv(ft.inject / "trend.csv")] == [8, 5, 2]
    assert len(read_csv(ft.inject / "curves.csv")) == 3 * 11

    out = pipeline.report([pre.root, ft.root], tmp_path / "summary.csv")
    summary = read_csv(out)
    assert sorted(r["method"] for r in summary) == ["baseline", "hrf"]
    assert all(int(r["n_runs"]) == 1 and float(r["vendi_embed_se"]) == 0.0 for r in summary)
    stages = {r["stage"] for r in repository.get_run(pipeline.run_id_for(ft_cfg))}
    assert stages == {"finetune", "eval"}


@pytest.mark.parametrize("method, selection", [("ddpo", False), ("hrf-d", True)])
def test_other_methods(tmp_path, tiny_config_path, method, selection):
    _, pre = _pretrained(tmp_path, tiny_config_path)
    cfg = load_run_config(tiny_config_path, out_dir=str(tmp_path / method), pretrained_dir=str(pre.root),
                          method=method)
    pipeline.run_pipeline(cfg, "finetune")
    paths = RunPaths(tmp_path / method)
    assert (paths.logs / "selection.csv").exists() == selection
    rows = read_csv(paths.logs / "train.csv")
    if method == "ddpo":
        assert {(int(r["window_lo"]), int(r["window_hi"])) for r in rows} == {(10, 10)}
    assert read_manifest(paths.manifest)["method"] == method


def test_runs_are_reproducible(tmp_path, tiny_config_path):
    outputs = []
    for name in ("a", "b"):
        _, pre = _pretrained(tmp_path, tiny_config_path, f"pre_{name}")
        cfg = load_run_config(tiny_config_path, out_dir=str(tmp_path / name), pretrained_dir=str(pre.root))
        pipeline.run_pipeline(cfg, "finetune")
        pipeline.run_pipeline(cfg, "eval")
        paths = RunPaths(tmp_path / name)
        outputs.append((pre.denoiser.read_bytes(), paths.finetuned.read_bytes(),
                        (paths.samples / "eval.csv").read_bytes(), (paths.logs / "train.csv").read_bytes()))
    assert outputs[0] == outputs[1]


def test_fixed_scorer_is_trained_once_and_copied(tmp_path, tiny_config_path):
    scorer = tmp_path / "scorer.bin"
    body = tiny_config_path.read_text().replace(
        "[reward]\nkind = region\n", f"[reward]\nkind = fixed_scorer\nscorer_path = {scorer}\n"
    ).replace("embedder_steps = 200\n", "embedder_steps = 50\nscorer_steps = 100\nsteps = 50\n")
    tiny_config_path.write_text(body.replace("steps = 300\n", ""))
    _, pre = _pretrained(tmp_path, tiny_config_path)
    assert scorer.exists()
    assert pre.scorer.read_bytes() == scorer.read_bytes()


def test_missing_artifacts_are_config_errors(tmp_path, tiny_config_path):
    cfg = load_run_config(tiny_config_path, out_dir=str(tmp_path / "ft"))
    with pytest.raises(ConfigError, match="pretrained_dir"):
        pipeline.run_pipeline(cfg, "finetune")
    with pytest.raises(ConfigError, match="Missing artifact"):
        pipeline.run_pipeline(cfg, "eval")
    cfg = load_run_config(tiny_config_path, out_dir=str(tmp_path / "ft"), pretrained_dir=str(tmp_path / "none"))
    with pytest.raises(ConfigError, match="Missing artifact"):
        pipeline.run_pipeline(cfg, "finetune")
    with pytest.raises(ConfigError):
        pipeline.run_pipeline(cfg, "distill")
    with pytest.raises(ConfigError):
        pipeline.report([tmp_path / "none"], tmp_path / "summary.csv")
