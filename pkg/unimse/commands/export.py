"""
export-embeddings: mean-pooled fusion states of one adapter layer, one row per sample
"""

from pathlib import Path
from typing import Optional, Tuple

import click
import numpy as np
import pandas as pd

from unimse.commands.common import banner, command_errors, config_options, load_run_config, require_data
from unimse.commands.evaluate import load_model
from unimse.datapipe import collate, formalize_manifest, load_manifest, write_features
from unimse.errors import ConfigError
from unimse.models import RunConfig, Split


def export_embeddings(checkpoint: Path, config: RunConfig, layer: int, out_path: Path,
                      split: Optional[Split] = None) -> Tuple[Path, Path, np.ndarray]:
    """Write an (N, d_model) float64 matrix file and a CSV label sidecar next to it"""
    model, vocab, stored = load_model(checkpoint)
    if not 1 <= layer <= len(model.fusion_layers):
        raise ConfigError(f"Layer {layer} outside the {len(model.fusion_layers)} adapter layers",
                          {"layer": layer})
    manifest = load_manifest(require_data(config), n_jobs=config.n_jobs)
    if split is not None:
        manifest = manifest.select(lambda r: r.split == split)
    inputs = formalize_manifest(manifest, vocab)
    if not inputs:
        raise ConfigError("No records to export")
    rows = []
    for start in range(0, len(inputs), config.batch_size):
        batch = collate(inputs[start:start + config.batch_size], vocab).drop_modality(stored.drop_modality)
        rows.append(model.pooled_fusion(batch, layer))
    matrix = np.concatenate(rows, axis=0)

    write_features(out_path, matrix, wide=True)
    labels_path = out_path.with_suffix(".labels.csv")
    pd.DataFrame([{
        "id": r.id, "task": r.task.value, "dataset": r.dataset, "split": r.split.value,
        "intensity": r.intensity, "emotion": r.emotion,
    } for r in manifest.records]).to_csv(labels_path, index=False)
    return out_path, labels_path, matrix


@click.command("export-embeddings")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--layer", type=int, required=True, help="Adapter layer j, counted from 1")
@click.option("--split", type=click.Choice([s.value for s in Split] + ["all"]), default="all")
@config_options
def export(checkpoint: str, layer: int, split: str, **options):
    """Export mean-pooled F(j) vectors with their labels"""
    with command_errors("export-embeddings"):
        config = load_run_config(**options)
        output_dir = banner("export-embeddings", config)
        matrix_path, labels_path, matrix = export_embeddings(
            Path(checkpoint), config, layer, output_dir / f"fusion_layer{layer}.umse",
            split=None if split == "all" else Split(split),
        )
        click.echo(f"✓ {matrix.shape[0]}x{matrix.shape[1]} matrix -> {matrix_path}")
        click.echo(f"✓ labels -> {labels_path}")
