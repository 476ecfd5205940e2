"""Deformable 2D registration with SSIM-augmented losses and DICE evaluation."""

__version__ = "0.1.0"
