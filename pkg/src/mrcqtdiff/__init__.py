"""Multi-resolution constant-Q diffusion for audio generation."""

__version__ = "0.1.0"
