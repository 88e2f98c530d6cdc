"""
eval: generate for every record of a split and score it under its source task
"""

from pathlib import Path
from typing import List, Optional, Tuple

import click

from unimse.checkpoint import check_compatible, load_checkpoint
from unimse.commands.common import banner, command_errors, config_options, load_run_config, require_data
from unimse.config import effective_model_config
from unimse.datapipe import formalize_manifest, load_manifest
from unimse.evalmetrics import format_report, write_reports
from unimse.inference import Prediction, predict, predictions_frame, score
from unimse.models import MetricReport, RunConfig, Split, Task
from unimse.textcodec import Vocabulary
from unimse.transformer import UniMSE


def load_model(checkpoint: Path, config: Optional[RunConfig] = None) -> Tuple[UniMSE, Vocabulary, RunConfig]:
    """Rebuild a model from a checkpoint, optionally checking it against `config`"""
    stored, vocab, tensors = load_checkpoint(checkpoint)
    model_config = effective_model_config(stored, len(vocab))
    if config is not None:
        check_compatible(effective_model_config(config, len(vocab)), model_config)
    model = UniMSE(model_config)
    model.load_state_dict(tensors)
    return model, vocab, stored


def evaluate_checkpoint(checkpoint: Path, config: RunConfig, split: Optional[Split] = Split.TEST,
                        task: Optional[Task] = None, check_config: bool = False
                        ) -> Tuple[List[MetricReport], List[Prediction]]:
    model, vocab, stored = load_model(checkpoint, config if check_config else None)
    manifest = load_manifest(require_data(config), n_jobs=config.n_jobs)
    if split is not None:
        manifest = manifest.select(lambda r: r.split == split)
    if task is not None:
        manifest = manifest.select(lambda r: r.task == task)
    inputs = formalize_manifest(manifest, vocab)
    predictions = predict(model, inputs, vocab, config.batch_size, config.n_jobs,
                          stored.drop_modality, config.malformed_fallback)
    return score(predictions, task), predictions


@click.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--task", type=click.Choice(["MSA", "ERC"]), default=None, help="Score only one source task")
@click.option("--split", type=click.Choice([s.value for s in Split] + ["all"]), default="test")
@config_options
def evaluate(checkpoint: str, task: Optional[str], split: str, **options):
    """Per-task and per-dataset metric reports for a checkpoint"""
    with command_errors("eval"):
        check_config = bool(options["config_path"] or options["overrides"])
        config = load_run_config(**options)
        output_dir = banner("eval", config)
        reports, predictions = evaluate_checkpoint(
            Path(checkpoint), config,
            split=None if split == "all" else Split(split),
            task=Task(task) if task else None,
            check_config=check_config,
        )
        if not reports:
            click.echo("⚠ No labelled records matched the filters")
        for report in reports:
            click.echo(format_report(report))
        malformed = sum(not p.well_formed for p in predictions)
        if malformed:
            click.echo(f"⚠ {malformed} malformed generations scored with fallback values")
        predictions_frame(predictions).to_csv(output_dir / "predictions.csv", index=False)
        path = write_reports(reports, output_dir / "reports.csv")
        click.echo(f"✓ {len(predictions)} samples scored, reports -> {path}")
