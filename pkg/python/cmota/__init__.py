"""
cmota: context-memory story visualization at desk scale

A bi-directional text/image-token transformer with a context memory,
trained with online pseudo-text augmentation on a synthetic story world.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("cmota")
except PackageNotFoundError:
    __version__ = "0.0.0"  # Not installed (dev/editable mode fallback)

__all__ = ["__version__"]
