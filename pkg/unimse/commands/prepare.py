"""
prepare: complete universal labels across an MSA and an ERC manifest
"""

from pathlib import Path
from typing import List, Optional, Tuple, Union

import click
import pandas as pd

from unimse.commands.common import banner, command_errors, config_options, load_run_config
from unimse.datapipe import Manifest, complete_manifest, load_manifest, write_manifest
from unimse.models import AuditEntry, CompletionSummary, RunConfig
from unimse.unilabel import get_oracle

UNIFIED_MANIFEST = "manifest.jsonl"
AUDIT_FILE = "completion_audit.csv"


def prepare_unified(msa_path: Union[str, Path], erc_path: Union[str, Path], config: RunConfig
                    ) -> Tuple[Manifest, List[AuditEntry], CompletionSummary]:
    """Completed manifest (MSA records first), audit rows and counts"""
    return complete_manifest(
        load_manifest(msa_path, n_jobs=config.n_jobs),
        load_manifest(erc_path, n_jobs=config.n_jobs),
        get_oracle(config.oracle),
        widen=config.neutral_pool_fallback,
        donors_from_train_only=config.donors_from_train_only,
    )


def write_audit(audits: List[AuditEntry], path: Path) -> Path:
    columns = ["sample_id", "donor_id", "similarity", "field", "value"]
    pd.DataFrame([a.model_dump() for a in audits], columns=columns).to_csv(path, index=False)
    return path


@click.command("prepare")
@click.option("--msa", "msa_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--erc", "erc_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--oracle", default=None, help="Similarity oracle name (default bow-cosine)")
@config_options
def prepare(msa_path: str, erc_path: str, oracle: Optional[str], **options):
    """Build the unified dataset and its completion audit"""
    with command_errors("prepare"):
        if oracle:
            options["overrides"] = tuple(options["overrides"]) + (f"oracle={oracle}",)
        config = load_run_config(**options)
        output_dir = banner("prepare", config)
        manifest, audits, summary = prepare_unified(msa_path, erc_path, config)
        manifest_path = write_manifest(manifest, output_dir / UNIFIED_MANIFEST)
        audit_path = write_audit(audits, output_dir / AUDIT_FILE)
        click.echo(f"✓ {summary.total} samples -> {manifest_path}")
        click.echo(f"  generated emotions:    {summary.generated_emotion}")
        click.echo(f"  generated intensities: {summary.generated_intensity}")
        if summary.widened_pools:
            click.echo(f"⚠ {summary.widened_pools} samples completed from a widened donor pool")
        click.echo(f"✓ audit -> {audit_path}")
