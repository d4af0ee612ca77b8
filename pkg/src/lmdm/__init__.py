"""Streaming latent flow-matching transformer on a numpy autodiff tape."""

__version__ = "0.1.0"
