"""
One module per subcommand; each exposes a click command registered in unimse.main
"""

__all__ = ["prepare", "synthesize", "train", "evaluate", "gradcheck", "export", "diagram"]
