"""
UniMSE command-line entry point
Every subcommand module registers one command on this group
"""

import click

from unimse import __version__
from unimse.commands.diagram import diagram
from unimse.commands.evaluate import evaluate
from unimse.commands.export import export
from unimse.commands.gradcheck import gradcheck
from unimse.commands.prepare import prepare
from unimse.commands.synthesize import synthesize
from unimse.commands.train import train


@click.group()
@click.version_option(__version__, prog_name="unimse")
def cli():
    """Unified multimodal sentiment and emotion recognition on toy-scale data"""


cli.add_command(synthesize)
cli.add_command(prepare)
cli.add_command(train)
cli.add_command(evaluate)
cli.add_command(gradcheck)
cli.add_command(export)
cli.add_command(diagram)


if __name__ == "__main__":
    cli()
