"""Fair synthetic tabular data via a fair conditional VAE distilled into a small student encoder."""

__version__ = "0.1.0"
