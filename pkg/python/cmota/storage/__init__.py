"""Artifact storage backends for cmota runs."""

from __future__ import annotations

from cmota.storage.base import ArtifactStorage
from cmota.storage.local import LocalStorage


def get_storage(url: str) -> ArtifactStorage | None:
    """Create a storage backend from a URL or path.

    Supported:
    - ``file:///path/to/dir/``: local filesystem
    - a plain filesystem path (no scheme)

    Returns ``None`` if the scheme is not recognised.
    """
    if url.startswith("file://"):
        return LocalStorage(url)
    if "://" not in url:
        return LocalStorage(url)
    return None


__all__ = ["ArtifactStorage", "LocalStorage", "get_storage"]
