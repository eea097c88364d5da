"""Class-balancing diffusion models on synthetic long-tailed Gaussian mixtures."""

__version__ = "0.1.0"
