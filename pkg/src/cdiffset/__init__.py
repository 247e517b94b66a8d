"""SAR-to-EO translation with a confidence-guided latent diffusion model."""

__version__ = "0.1.0"
