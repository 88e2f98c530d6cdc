"""
Options and error handling shared by every subcommand
"""

import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Tuple

import click

from unimse.config import resolve_config, write_effective_config
from unimse.errors import UniMSEError
from unimse.models import RunConfig


def config_options(f):
    """--config/--set/--seed/--preset plus the ablation and data flags"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="YAML config file"),
        click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                     help="Override a config key (dotted for nested keys); repeatable"),
        click.option("--seed", type=int, default=None, help="Master seed"),
        click.option("--preset", type=click.Choice(["desk", "paper", "full"]), default=None),
        click.option("--output-dir", type=click.Path(file_okay=False), default=None),
        click.option("--data", "data_path", type=click.Path(dir_okay=False), default=None,
                     help="Manifest (JSON lines)"),
        click.option("--no-pmf", is_flag=True, default=False, help="Disable the PMF adapters"),
        click.option("--no-cl", is_flag=True, default=False, help="Disable contrastive learning"),
        click.option("--drop-modality", type=click.Choice(["a", "v", "av"]), default=None),
        click.option("--exclude-dataset", "exclude_datasets", multiple=True,
                     help="Leave a dataset out of training; repeatable"),
        click.option("--jobs", "n_jobs", type=int, default=None, help="Worker threads"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def load_run_config(config_path: Optional[str], overrides: Tuple[str, ...], seed: Optional[int],
                    preset: Optional[str], output_dir: Optional[str], data_path: Optional[str],
                    no_pmf: bool, no_cl: bool, drop_modality: Optional[str],
                    exclude_datasets: Tuple[str, ...], n_jobs: Optional[int]) -> RunConfig:
    return resolve_config(
        preset=preset,
        config_path=config_path,
        overrides=overrides,
        seed=seed,
        output_dir=output_dir,
        data_path=data_path,
        no_pmf=True if no_pmf else None,
        no_cl=True if no_cl else None,
        drop_modality=drop_modality,
        exclude_datasets=list(exclude_datasets) or None,
        n_jobs=n_jobs,
    )


def banner(title: str, config: RunConfig) -> Path:
    """Print the command banner and persist the effective config"""
    output_dir = Path(config.output_dir)
    click.echo("=" * 60)
    click.echo(f"unimse {title}")
    click.echo(f"  preset: {config.preset}  seed: {config.seed}  output: {output_dir}")
    click.echo("=" * 60)
    write_effective_config(config, output_dir)
    return output_dir


@contextmanager
def command_errors(title: str):
    """Print library errors as a ✗ line and exit with status 1"""
    try:
        yield
    except (UniMSEError, OSError, ValueError) as e:
        click.echo(f"✗ {title} failed: {e}", err=True)
        sys.exit(1)


def require_data(config: RunConfig) -> Path:
    if not config.data_path:
        raise click.UsageError("No manifest given; pass --data or set data_path")
    return Path(config.data_path)
