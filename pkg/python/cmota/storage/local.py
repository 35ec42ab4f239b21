"""Local filesystem storage backend (plain paths and ``file://`` URLs)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from cmota.storage.base import ArtifactStorage


class LocalStorage(ArtifactStorage):
    """Store/retrieve run artifacts under a local directory.

    URL format: ``file:///absolute/path/to/directory/`` or a plain path.
    """

    def __init__(self, url: str | os.PathLike[str]) -> None:
        path_str = os.fspath(url)
        # Strip scheme; handle file:///path and file://localhost/path
        path_str = path_str.removeprefix("file://")
        if path_str.startswith("localhost"):
            path_str = path_str.removeprefix("localhost")
        self.root = Path(path_str)

    def path(self, key: str) -> Path:
        return self.root / key

    def write_bytes(self, key: str, data: bytes) -> None:
        dest = self.path(key)
        dest.parent.mkdir(parents=True, exist_ok=True)
        # Temp file in the target directory so os.replace stays on one filesystem
        fd, tmp_name = tempfile.mkstemp(prefix=f".{dest.name}.", suffix=".tmp", dir=dest.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp_name, dest)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise

    def read_bytes(self, key: str) -> bytes:
        src = self.path(key)
        if not src.is_file():
            raise FileNotFoundError(f"Artifact not found: {src}")
        return src.read_bytes()

    def exists(self, key: str) -> bool:
        return self.path(key).is_file()

    def append_line(self, key: str, line: str) -> None:
        dest = self.path(key)
        dest.parent.mkdir(parents=True, exist_ok=True)
        with open(dest, "a", encoding="utf-8") as fh:
            fh.write(line.rstrip("\n") + "\n")

    def list_keys(self, prefix: str = "", suffix: str = "") -> list[str]:
        """List all files under a prefix, sorted, optionally filtered by suffix."""
        search_path = self.root / prefix if prefix else self.root
        if not search_path.exists():
            return []
        return sorted(
            p.relative_to(self.root).as_posix()
            for p in search_path.glob(f"**/*{suffix}")
            if p.is_file() and not p.name.endswith(".tmp")
        )
