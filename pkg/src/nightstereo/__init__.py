"""Self-supervised stereo depth estimation for low-light scenes, at desk scale."""

__version__ = "0.1.0"
