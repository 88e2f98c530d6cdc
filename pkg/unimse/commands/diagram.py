"""
diagram: graphviz DOT source of the configured model
"""

import click

from diagrams.architecture import architecture_diagram
from unimse.commands.common import banner, command_errors, config_options, load_run_config
from unimse.config import effective_model_config


@click.command("diagram")
@config_options
def diagram(**options):
    """Write architecture.dot for the configured model"""
    with command_errors("diagram"):
        config = load_run_config(**options)
        output_dir = banner("diagram", config)
        dot = architecture_diagram(effective_model_config(config, config.model.vocab_size))
        path = output_dir / "architecture.dot"
        path.write_text(dot.source, encoding="utf-8")
        click.echo(f"✓ diagram source -> {path}")
