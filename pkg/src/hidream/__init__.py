"""Hierarchical ROI-conditioned latent diffusion, desk scale."""
