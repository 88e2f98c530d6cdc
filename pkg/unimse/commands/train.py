"""
train: fit the encoder-decoder on a unified manifest
Writes loss_log.csv, vocab.txt, final.ckpt and best.ckpt under the output directory
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import click
import numpy as np
import pandas as pd

from unimse import numcore as nc
from unimse.checkpoint import save_checkpoint
from unimse.commands.common import banner, command_errors, config_options, load_run_config, require_data
from unimse.config import derive_seeds, effective_model_config, write_effective_config
from unimse.datapipe import FormalizedInput, Manifest, batch_iter, corpus_texts, formalize_manifest, load_manifest
from unimse.errors import ConfigError, NumericError, UniMSEError
from unimse.inference import exact_match, predict
from unimse.models import RunConfig, Split
from unimse.objectives import compute_loss
from unimse.optim import build_optimizer
from unimse.textcodec import Vocabulary, build_vocab
from unimse.transformer import UniMSE

LOSS_COLUMNS = ["step", "epoch", "task", "ta", "tv", "total"]


@dataclass
class TrainResult:
    model: UniMSE
    vocab: Vocabulary
    losses: pd.DataFrame
    best_score: Optional[float]
    best_epoch: int
    output_dir: Path


def training_inputs(manifest: Manifest, config: RunConfig, vocab: Vocabulary) -> List[FormalizedInput]:
    train = manifest.select(lambda r: r.split == Split.TRAIN and r.dataset not in config.exclude_datasets)
    if not train.records:
        raise ConfigError("No training records left after filtering",
                          {"exclude_datasets": config.exclude_datasets})
    inputs = formalize_manifest(train, vocab)
    incomplete = [x.id for x in inputs if x.target_ids is None]
    if incomplete:
        raise ConfigError(f"{len(incomplete)} training records have incomplete labels; run prepare first",
                          {"first": incomplete[0]})
    return inputs


def train_model(config: RunConfig, manifest: Optional[Manifest] = None,
                echo: Callable[[str], None] = click.echo) -> TrainResult:
    """
    Deterministic training loop

    The vocabulary comes from the training split. Validation exact-match is measured every
    `eval_every` epochs and after the last one; best.ckpt keeps the earliest best score.
    """
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(config, output_dir)
    seeds = derive_seeds(config.seed)
    if manifest is None:
        manifest = load_manifest(require_data(config), n_jobs=config.n_jobs)

    train_manifest = manifest.select(lambda r: r.split == Split.TRAIN and r.dataset not in config.exclude_datasets)
    vocab = build_vocab(corpus_texts(train_manifest))
    vocab.save(output_dir / "vocab.txt")
    inputs = training_inputs(manifest, config, vocab)
    valid = [x for x in formalize_manifest(manifest.select(lambda r: r.split == Split.VALID), vocab)
             if x.target_ids is not None]

    model = UniMSE(effective_model_config(config, len(vocab)), seed=seeds.init)
    optimizer = build_optimizer(model.groups(), config.optim)
    cl_enabled = model.config.n_cl > 0

    save_checkpoint(output_dir / "best.ckpt", config, vocab, model.state_dict())
    best_score: Optional[float] = None
    best_epoch = 0
    rows = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        batches = batch_iter(inputs, config.batch_size, vocab, seed=seeds.shuffle + epoch,
                             shuffle=True, cl_enabled=cl_enabled)
        for batch in batches:
            batch = batch.drop_modality(config.drop_modality)
            optimizer.zero_grad()
            graph = nc.Graph(seed=seeds.dropout + step)
            try:
                with graph.record():
                    loss, breakdown, _ = compute_loss(model, batch, config.alpha, config.beta,
                                                      config.temperature, config.drop_modality)
            except NumericError as e:
                dump = output_dir / "nonfinite_batch.json"
                dump.write_text(json.dumps({"epoch": epoch, "step": step, "op": e.op, "batch_ids": batch.ids},
                                           indent=2), encoding="utf-8")
                raise UniMSEError(f"Non-finite value in {e.op} at epoch {epoch}, step {step}; batch ids in {dump}",
                                  {"batch_ids": batch.ids})
            graph.backward(loss)
            optimizer.step()
            step += 1
            rows.append({"step": step, "epoch": epoch, "task": breakdown.task, "ta": breakdown.ta_sum,
                         "tv": breakdown.tv_sum, "total": breakdown.total})
            epoch_losses.append(breakdown.total)

        line = f"epoch {epoch:>4}/{config.epochs}  loss {np.mean(epoch_losses):.4f}"
        if valid and (epoch % config.eval_every == 0 or epoch == config.epochs):
            score = exact_match(predict(model, valid, vocab, config.batch_size, config.n_jobs,
                                        config.drop_modality, config.malformed_fallback))
            line += f"  valid exact-match {score:.3f}"
            if best_score is None or score > best_score:
                best_score, best_epoch = score, epoch
                save_checkpoint(output_dir / "best.ckpt", config, vocab, model.state_dict())
        echo(line)

    if not valid:
        save_checkpoint(output_dir / "best.ckpt", config, vocab, model.state_dict())
        best_epoch = config.epochs
    save_checkpoint(output_dir / "final.ckpt", config, vocab, model.state_dict())
    losses = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    losses.to_csv(output_dir / "loss_log.csv", index=False, float_format="%.17g")
    return TrainResult(model, vocab, losses, best_score, best_epoch, output_dir)


@click.command("train")
@config_options
def train(**options):
    """Train on the unified manifest given by --data"""
    with command_errors("train"):
        config = load_run_config(**options)
        banner("train", config)
        result = train_model(config)
        click.echo(f"✓ {len(result.losses)} steps, final.ckpt and best.ckpt in {result.output_dir}")
        if result.best_score is not None:
            click.echo(f"✓ best valid exact-match {result.best_score:.3f} at epoch {result.best_epoch}")
