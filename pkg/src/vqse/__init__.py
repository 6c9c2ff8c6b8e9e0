"""Semi-supervised speech enhancement with a partitioned VQ-VAE prior."""

__version__ = "0.1.0"
