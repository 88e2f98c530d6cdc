import json

import numpy as np
import pandas as pd
import pytest

from unimse.checkpoint import load_checkpoint
from unimse.commands import train as train_command
from unimse.commands.train import train_model, training_inputs
from unimse.config import derive_seeds, effective_model_config, resolve_config
from unimse.datapipe import complete_manifest, synthesize_dataset
from unimse.errors import ConfigError, NumericError, UniMSEError
from unimse.evalmetrics import msa_metrics
from unimse.inference import exact_match, predict
from unimse.models import Split, SynthConfig, Task
from unimse.transformer import UniMSE
from unimse.unilabel import get_oracle


def _quiet(line):
    pass


def _corpus(run_config_file, seed=0):
    config = resolve_config(config_path=run_config_file)
    raw = synthesize_dataset(config.synth, seed)
    manifest, _, _ = complete_manifest(raw.select(lambda r: r.task == Task.MSA),
                                       raw.select(lambda r: r.task == Task.ERC),
                                       get_oracle("bow-cosine"), widen=True)
    return manifest


def test_training_is_deterministic(tmp_path, run_config_file):
    manifest = _corpus(run_config_file)
    runs = []
    for name in ("a", "b"):
        config = resolve_config(config_path=run_config_file, output_dir=str(tmp_path / name), seed=6)
        runs.append(train_model(config, manifest, echo=_quiet))

    assert (tmp_path / "a" / "loss_log.csv").read_bytes() == (tmp_path / "b" / "loss_log.csv").read_bytes()
    _, _, first = load_checkpoint(tmp_path / "a" / "final.ckpt")
    _, _, second = load_checkpoint(tmp_path / "b" / "final.ckpt")
    assert all(np.array_equal(first[k], second[k]) for k in first)
    assert runs[0].best_epoch == runs[1].best_epoch


def test_loss_log_holds_the_exact_logged_totals(tmp_path, run_config_file):
    manifest = _corpus(run_config_file)
    result = train_model(resolve_config(config_path=run_config_file, output_dir=str(tmp_path)), manifest, echo=_quiet)
    logged = pd.read_csv(tmp_path / "loss_log.csv", float_precision="round_trip")
    np.testing.assert_array_equal(logged["total"].to_numpy(), result.losses["total"].to_numpy())
    assert (logged["ta"] > 0).all() and (logged["tv"] > 0).all()


def test_zero_epochs_leave_the_initial_weights(tmp_path, run_config_file):
    manifest = _corpus(run_config_file)
    config = resolve_config(config_path=run_config_file, output_dir=str(tmp_path), epochs=0, seed=2)
    result = train_model(config, manifest, echo=_quiet)
    initial = UniMSE(effective_model_config(config, len(result.vocab)), seed=derive_seeds(2).init).state_dict()
    _, _, stored = load_checkpoint(tmp_path / "final.ckpt")
    assert set(stored) == set(initial)
    assert all(np.array_equal(stored[k], initial[k]) for k in initial)
    assert result.losses.empty


def test_without_contrastive_learning_total_equals_task(tmp_path, run_config_file):
    manifest = _corpus(run_config_file)
    config = resolve_config(config_path=run_config_file, output_dir=str(tmp_path), no_cl=True, epochs=1)
    result = train_model(config, manifest, echo=_quiet)
    assert (result.losses["total"] == result.losses["task"]).all()
    assert (result.losses["ta"] == 0).all() and (result.losses["tv"] == 0).all()
    assert not [n for n in result.model.params if n.startswith("cl.")]


def test_excluding_every_training_dataset_is_an_error(tmp_path, run_config_file):
    manifest = _corpus(run_config_file)
    config = resolve_config(config_path=run_config_file, output_dir=str(tmp_path),
                            exclude_datasets=["synth_msa", "synth_erc"])
    with pytest.raises(UniMSEError):
        train_model(config, manifest, echo=_quiet)


def test_incomplete_training_labels_are_rejected(run_config_file, vocab):
    config = resolve_config(config_path=run_config_file)
    raw = synthesize_dataset(config.synth, 0)
    with pytest.raises(ConfigError, match="incomplete labels"):
        training_inputs(raw, config, vocab)


def test_non_finite_loss_dumps_the_batch(tmp_path, run_config_file, monkeypatch):
    manifest = _corpus(run_config_file)

    def exploding(*args, **kwargs):
        raise NumericError("log_softmax")

    monkeypatch.setattr(train_command, "compute_loss", exploding)
    config = resolve_config(config_path=run_config_file, output_dir=str(tmp_path))
    with pytest.raises(UniMSEError, match="log_softmax"):
        train_model(config, manifest, echo=_quiet)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert dump["op"] == "log_softmax" and dump["step"] == 0
    assert len(dump["batch_ids"]) == config.batch_size


def test_sixty_four_samples_are_memorized_within_300_epochs(tmp_path):
    synth = SynthConfig(n_msa={Split.TRAIN: 32}, n_erc={Split.TRAIN: 32}, d_acoustic=4, d_visual=4,
                        filler_vocab=12, text_min_words=2, text_max_words=4, min_frames=2, max_frames=4,
                        dialogue_length=4)
    raw = synthesize_dataset(synth, seed=1)
    manifest, _, _ = complete_manifest(raw.select(lambda r: r.task == Task.MSA),
                                       raw.select(lambda r: r.task == Task.ERC),
                                       get_oracle("bow-cosine"), widen=True)
    assert len(manifest) == 64
    config = resolve_config(
        overrides=[
            "model.d_ff=64", "model.d_acoustic_in=4", "model.d_visual_in=4",
            "model.d_acoustic=8", "model.d_visual=8", "model.d_common=8",
            "optim.lr_backbone=0.01", "optim.lr_main=0.01", "optim.lr_pmf=0.01",
        ],
        batch_size=16, epochs=300, seed=0, output_dir=str(tmp_path),
    )
    assert config.model.d_model == 32
    result = train_model(config, manifest, echo=_quiet)
    inputs = training_inputs(manifest, config, result.vocab)
    predictions = predict(result.model, inputs, result.vocab, batch_size=16)
    assert exact_match(predictions) >= 0.95

    msa = [p for p in predictions if p.task == Task.MSA]
    report = msa_metrics([p.value for p in msa], [p.gold for p in msa])
    assert report.metrics["mae"] <= 0.05
