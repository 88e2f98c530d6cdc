"""
UniMSE: universal-label multimodal sentiment analysis and emotion recognition
"""

__version__ = "1.0.0"
