"""Multi-focal conditioned latent diffusion on procedurally generated figures."""

__version__ = "0.1.0"
