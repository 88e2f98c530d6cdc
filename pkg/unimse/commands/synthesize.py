"""
synthesize: write planted-cue MSA and ERC manifests for `prepare`
"""

from pathlib import Path
from typing import Tuple

import click

from unimse.commands.common import banner, command_errors, config_options, load_run_config
from unimse.config import derive_seeds
from unimse.datapipe import Manifest, synthesize_dataset, write_manifest
from unimse.models import SynthConfig, Task


def write_synthetic(synth: SynthConfig, seed: int, output_dir: Path) -> Tuple[Path, Path, Manifest]:
    """Generate a corpus and write it as msa/manifest.jsonl and erc/manifest.jsonl"""
    manifest = synthesize_dataset(synth, seed)
    msa_path = write_manifest(manifest.select(lambda r: r.task == Task.MSA), output_dir / "msa" / "manifest.jsonl")
    erc_path = write_manifest(manifest.select(lambda r: r.task == Task.ERC), output_dir / "erc" / "manifest.jsonl")
    return msa_path, erc_path, manifest


@click.command("synthesize")
@config_options
def synthesize(**options):
    """Generate a synthetic MSA + ERC corpus with planted cues"""
    with command_errors("synthesize"):
        config = load_run_config(**options)
        output_dir = banner("synthesize", config)
        msa_path, erc_path, manifest = write_synthetic(config.synth, derive_seeds(config.seed).synth, output_dir)
        n_msa = sum(r.task == Task.MSA for r in manifest.records)
        click.echo(f"✓ {n_msa} MSA records -> {msa_path}")
        click.echo(f"✓ {len(manifest) - n_msa} ERC records -> {erc_path}")
