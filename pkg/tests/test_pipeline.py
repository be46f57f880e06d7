from pathlib import Path

import numpy as np
import pytest
import yaml
from typer.testing import CliRunner

from hri_intent import pipeline
from hri_intent.cli import app
from hri_intent.config import load_config
from hri_intent.data import load_dataset, load_standardizer, save_dataset, validate_features
from hri_intent.detectors import Variant

runner = CliRunner()

PREPROCESS_OUTPUTS = (
    pipeline.STANDARDIZED,
    pipeline.STANDARDIZER,
    pipeline.WINDOW_INDEX,
    pipeline.SUMMARY,
)


def invoke(*args: str, out: Path | None = None, config: Path | None = None):
    argv = list(args)
    if config is not None:
        argv += ["--config", str(config)]
    if out is not None:
        argv += ["--out", str(out)]
    return runner.invoke(app, argv + ["--log-level", "WARNING"])


def test_preprocess_is_reproducible(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    first = invoke("preprocess", config=tiny_config, out=a)
    assert first.exit_code == 0, first.output
    assert "All" in first.output and "Windows:" in first.output
    assert invoke("preprocess", config=tiny_config, out=b).exit_code == 0
    for name in PREPROCESS_OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "config.yaml").is_file()


def test_preprocess_missing_dataset_is_usage_error(tiny_config, tmp_path):
    result = runner.invoke(
        app,
        ["preprocess", "--config", str(tiny_config), "--dataset", str(tmp_path / "none.jsonl")],
    )
    assert result.exit_code == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"vae": {"latent": 3}}))
    result = invoke("preprocess", config=path)
    assert result.exit_code == 2
    assert "latent" in result.output


def test_stage_needs_its_inputs(tiny_config, tmp_path):
    result = invoke("train-vae", config=tiny_config, out=tmp_path / "empty")
    assert result.exit_code == 2
    assert "preprocess" in result.output


def test_stage_chain(tiny_config, tmp_path):
    out = tmp_path / "chain"
    assert invoke("preprocess", config=tiny_config, out=out).exit_code == 0

    result = invoke("train-vae", config=tiny_config, out=out)
    assert result.exit_code == 0, result.output
    assert (out / pipeline.VAE_CHECKPOINT).is_file()
    history = (out / pipeline.VAE_HISTORY).read_text().splitlines()
    assert len(history) == 1 + 2

    result = invoke("generate", "--n", "100", "--box-space", config=tiny_config, out=out)
    assert result.exit_code == 0, result.output
    synthetic = load_dataset(out / pipeline.SYNTHETIC)
    assert len(synthetic) == 100
    for record in synthetic:
        assert len(record) == 15
        validate_features(record.features)
        assert np.array_equal(record.labels, (record.label_scores >= 0.5).astype(int))

    standardizer = load_standardizer(out / pipeline.STANDARDIZER)
    boxed = load_dataset(out / pipeline.SYNTHETIC_BOX)
    assert [r.id for r in boxed] == [r.id for r in synthetic]
    for std_record, box_record in zip(synthetic, boxed):
        np.testing.assert_allclose(
            box_record.features, standardizer.invert(std_record.features), atol=1e-12
        )
        assert np.array_equal(box_record.label_scores, std_record.label_scores)

    result = invoke("train-detector", config=tiny_config, out=out)
    assert result.exit_code == 0, result.output
    rows = [line for line in result.output.splitlines() if "best_epoch=" in line]
    assert [row.split()[0] for row in rows] == [v.value for v in Variant]
    for variant in Variant:
        assert (out / pipeline.detector_checkpoint(variant)).is_file()

    result = invoke("evaluate", "--variant", "multimodal", config=tiny_config, out=out)
    assert result.exit_code == 0, result.output
    eval_dir = out / "eval" / "multimodal"
    report = (eval_dir / "report.txt").read_text()
    assert "frame.auroc.mean=" in report
    predictions = sorted((eval_dir / "predictions").glob("*.csv"))
    assert len(predictions) == 10
    assert predictions[0].read_text().startswith("frame_index,probability,label\n")


def test_augmented_detector_needs_vae(tiny_config, tmp_path):
    out = tmp_path / "novae"
    assert invoke("preprocess", config=tiny_config, out=out).exit_code == 0
    result = invoke("train-detector", "--variant", "multimodal_vae", config=tiny_config, out=out)
    assert result.exit_code == 2
    assert "train-vae" in result.output


def read_summary(path: Path) -> list[list[str]]:
    return [line.split(",") for line in path.read_text().splitlines()]


def test_crossval_outputs_and_determinism(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert invoke("crossval", config=tiny_config, out=a).exit_code == 0
    assert invoke("crossval", config=tiny_config, out=b).exit_code == 0
    summary = read_summary(a / "crossval" / "summary.csv")
    assert summary[0] == ["variant", "level", "metric", "mean", "std"]
    assert len(summary) == 1 + len(Variant) * 6
    for row in summary[1:]:
        assert 0.0 <= float(row[3]) <= 1.0
    assert summary == read_summary(b / "crossval" / "summary.csv")
    report = (a / "crossval" / "multimodal" / "report.txt").read_text()
    assert "folds=2" in report


def test_crossval_early_stops_inside_training_folds(tiny_config, tmp_path, monkeypatch):
    seen = []
    train_variant = pipeline.train_variant

    def recording_train_variant(cfg, variant, train_records, valid_records, rng, vae=None):
        seen.append(({r.id for r in train_records}, {r.id for r in valid_records or []}))
        return train_variant(cfg, variant, train_records, valid_records, rng, vae)

    monkeypatch.setattr(pipeline, "train_variant", recording_train_variant)
    cfg = load_config(tiny_config).with_overrides(out=tmp_path / "cv")
    records, _ = pipeline.split_by_env(load_dataset(cfg.paths.dataset))
    folds = pipeline.stratified_kfold(records, cfg.data.folds, cfg.seed)
    pipeline.crossval(cfg)

    assert len(seen) == len(folds) * len(Variant)
    for k, fold in enumerate(folds):
        fold_train = {r.id for r in fold.train}
        for train_ids, valid_ids in seen[k * len(Variant) : (k + 1) * len(Variant)]:
            assert valid_ids
            assert not train_ids & valid_ids
            assert train_ids | valid_ids == fold_train


def test_inner_validation_split_falls_back_to_training(tiny_config, toy_records):
    cfg = load_config(tiny_config)
    negative = [r for r in toy_records if not r.has_positive]
    train, valid = pipeline.inner_validation_split(cfg, negative, 0)
    assert train == negative and valid == []


def test_heldout_env3(tiny_config, tmp_path):
    out = tmp_path / "heldout"
    result = invoke("heldout-env3", config=tiny_config, out=out)
    assert result.exit_code == 0, result.output
    assert (out / "heldout_env3" / "summary.csv").is_file()
    assert "folds=2" in (out / "heldout_env3" / "pose_only" / "report.txt").read_text()


def test_heldout_without_env3_is_usage_error(tiny_config, tmp_path):
    records = [r for r in load_dataset(load_config(tiny_config).paths.dataset) if r.env != 3]
    path = tmp_path / "no_env3.jsonl"
    save_dataset(records, path)
    result = runner.invoke(
        app, ["heldout-env3", "--config", str(tiny_config), "--dataset", str(path)]
    )
    assert result.exit_code == 2


def test_minority_seed_frames(toy_records):
    seeds = pipeline.minority_seed_frames(toy_records)
    assert seeds.shape[1] == 59
    assert np.all(seeds[:, 58] == 1)
    negative = [r for r in toy_records if not r.has_positive]
    with pytest.raises(pipeline.GenerationError):
        pipeline.minority_seed_frames(negative)
