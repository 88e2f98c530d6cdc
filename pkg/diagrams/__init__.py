"""
Graphviz renderings of a configured UniMSE model
"""

__all__ = ["architecture"]
