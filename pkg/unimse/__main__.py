from unimse.main import cli

cli()
