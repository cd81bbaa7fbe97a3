"""Re-identification embeddings learned by cycle association between video frames."""

__version__ = "0.1.0"
