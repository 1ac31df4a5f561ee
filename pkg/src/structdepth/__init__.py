"""Structure-aware monocular depth toolkit: losses, metrics, attention blocks, curriculum sampling."""

__version__ = "0.1.0"
