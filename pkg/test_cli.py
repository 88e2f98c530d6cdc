import json

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from unimse.checkpoint import load_checkpoint
from unimse.commands.evaluate import load_model
from unimse.datapipe import collate, formalize_manifest, load_manifest, read_features
from unimse.main import cli


def _invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args], catch_exceptions=False)


def _pipeline(tmp_path, config):
    """synthesize -> prepare -> train; returns the unified manifest and run directory"""
    raw, unified, run = tmp_path / "raw", tmp_path / "unified", tmp_path / "run"
    result = _invoke("synthesize", "--config", config, "--output-dir", raw)
    assert result.exit_code == 0, result.output
    result = _invoke("prepare", "--msa", raw / "msa" / "manifest.jsonl", "--erc", raw / "erc" / "manifest.jsonl",
                     "--config", config, "--output-dir", unified)
    assert result.exit_code == 0, result.output
    manifest = unified / "manifest.jsonl"
    result = _invoke("train", "--config", config, "--data", manifest, "--output-dir", run)
    assert result.exit_code == 0, result.output
    return manifest, run


def test_full_command_pipeline(tmp_path, run_config_file):
    manifest, run = _pipeline(tmp_path, run_config_file)

    audit = pd.read_csv(tmp_path / "unified" / "completion_audit.csv")
    assert len(audit) == 32
    assert set(audit["field"]) == {"emotion", "intensity"}
    for name in ("final.ckpt", "best.ckpt", "vocab.txt", "loss_log.csv", "effective_config.yaml"):
        assert (run / name).exists()
    losses = pd.read_csv(run / "loss_log.csv")
    assert list(losses.columns) == ["step", "epoch", "task", "ta", "tv", "total"]
    assert losses["step"].tolist() == list(range(1, len(losses) + 1))
    assert losses["epoch"].max() == 2

    result = _invoke("eval", "--checkpoint", run / "final.ckpt", "--data", manifest, "--output-dir", tmp_path / "eval")
    assert result.exit_code == 0, result.output
    assert "MSA  N=4" in result.output and "ERC [synth_erc]  N=4" in result.output
    reports = pd.read_csv(tmp_path / "eval" / "reports.csv")
    assert {"mae", "corr", "acc7", "acc2_nonneg", "f1_nonneg", "acc2_pos", "f1_pos", "acc", "wf1"} <= set(reports["metric"])
    assert len(pd.read_csv(tmp_path / "eval" / "predictions.csv")) == 8

    result = _invoke("export-embeddings", "--checkpoint", run / "final.ckpt", "--layer", 1, "--data", manifest,
                     "--output-dir", tmp_path / "export")
    assert result.exit_code == 0, result.output
    exported = read_features(tmp_path / "export" / "fusion_layer1.umse").values
    labels = pd.read_csv(tmp_path / "export" / "fusion_layer1.labels.csv")
    assert exported.shape == (32, 8) and len(labels) == 32

    model, vocab, _ = load_model(run / "final.ckpt")
    inputs = formalize_manifest(load_manifest(manifest), vocab)
    recomputed = model.pooled_fusion(collate(inputs, vocab), 1)
    np.testing.assert_allclose(exported, recomputed, rtol=0, atol=1e-12)


def test_eval_rejects_incompatible_overrides(tmp_path, run_config_file):
    manifest, run = _pipeline(tmp_path, run_config_file)
    result = _invoke("eval", "--checkpoint", run / "final.ckpt", "--data", manifest, "--config", run_config_file,
                     "--set", "model.d_ff=32", "--output-dir", tmp_path / "eval")
    assert result.exit_code == 1
    assert "✗ eval failed" in result.output and "d_ff" in result.output


def test_gradcheck_command_passes_on_tiny_model(tmp_path, run_config_file):
    result = _invoke("gradcheck", "--config", run_config_file, "--output-dir", tmp_path)
    assert result.exit_code == 0, result.output
    assert "✓ gradcheck passed" in result.output
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and report["failures"] == []


@pytest.mark.parametrize("flags, absent", [
    ((), ()),
    (("--no-cl",), ("cl.",)),
    (("--no-pmf",), (".pmf.", "lstm.", "cl.")),
])
def test_gradcheck_passes_on_desk_dimensions(tmp_path, flags, absent):
    result = _invoke("gradcheck", "--preset", "desk", *flags, "--output-dir", tmp_path)
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and report["max_rel_error"] <= 1e-4
    checked = set(report["per_param"])
    assert {"embed.token", "encoder.0.self_attn.wq", "encoder.1.ffn.w1", "head.w"} <= checked
    if not absent:
        assert {"encoder.0.pmf.wd", "encoder.1.pmf.wu", "encoder.1.pmf.w", "lstm.acoustic.w",
                "cl.fusion.0.w", "cl.fusion.1.w", "cl.visual.w"} <= checked
    for prefix in absent:
        assert not [name for name in checked if prefix in name]


def test_gradcheck_refuses_wide_models(tmp_path):
    result = _invoke("gradcheck", "--set", "model.d_model=128", "--output-dir", tmp_path)
    assert result.exit_code == 1
    assert "refuses d_model 128" in result.output


def test_paper_preset_is_accepted_on_the_command_line(tmp_path):
    result = _invoke("diagram", "--preset", "paper", "--output-dir", tmp_path)
    assert result.exit_code == 0, result.output
    assert yaml.safe_load((tmp_path / "effective_config.yaml").read_text())["preset"] == "paper"

    result = _invoke("gradcheck", "--preset", "paper", "--output-dir", tmp_path)
    assert result.exit_code == 1
    assert "refuses d_model 768" in result.output


def test_diagram_command_writes_dot_source(tmp_path, run_config_file):
    result = _invoke("diagram", "--config", run_config_file, "--output-dir", tmp_path)
    assert result.exit_code == 0, result.output
    source = (tmp_path / "architecture.dot").read_text()
    assert source.lstrip().startswith(("digraph", "//"))
    assert "PMF" in source


def test_config_errors_exit_with_status_one(tmp_path):
    result = _invoke("train", "--set", "model.widht=3", "--data", tmp_path / "m.jsonl", "--output-dir", tmp_path)
    assert result.exit_code == 1
    assert "✗ train failed" in result.output and "model.widht" in result.output

    result = _invoke("train", "--output-dir", tmp_path)
    assert result.exit_code == 2
    assert "--data" in result.output


def test_missing_manifest_is_reported(tmp_path):
    result = _invoke("train", "--data", tmp_path / "absent.jsonl", "--output-dir", tmp_path)
    assert result.exit_code == 1
    assert "Manifest not found" in result.output


def test_checkpoint_records_the_run_config(tmp_path, run_config_file):
    _, run = _pipeline(tmp_path, run_config_file)
    config, vocab, tensors = load_checkpoint(run / "final.ckpt")
    assert config.epochs == 2 and config.batch_size == 4
    assert vocab.tokens == (run / "vocab.txt").read_text().splitlines()
    assert tensors["head.w"].shape == (8, len(vocab))


def test_version_option():
    result = _invoke("--version")
    assert result.exit_code == 0 and "unimse" in result.output


def test_dataset_setup_writes_a_trainable_manifest(tmp_path):
    from dataset_setup import create_synthetic_corpus, create_unified_dataset

    corpus = create_synthetic_corpus(tmp_path, n_train=32, n_valid=4, n_test=4, seed=0)
    assert (tmp_path / "raw" / "msa" / "manifest.jsonl").exists()
    path = create_unified_dataset(corpus, tmp_path)
    unified = load_manifest(path)
    assert len(unified) == len(corpus) == 80
    assert all(r.intensity is not None and r.emotion is not None for r in unified.records)
    assert (tmp_path / "unified" / "completion_audit.csv").exists()
