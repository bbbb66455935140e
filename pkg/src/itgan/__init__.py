"""Learning informative latent vectors for a frozen conditional GAN.

Submodules are imported on demand; ``itgan.cli`` is the command-line entry point.
"""
from __future__ import annotations

__version__ = "0.1.0"
