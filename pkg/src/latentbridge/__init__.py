"""Latent-bridge testbed."""
__version__ = "0.1.0"
