"""Abstract base class for run-artifact storage."""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from typing import Any


class ArtifactStorage(ABC):
    """Interface for reading and writing run artifacts by key.

    Keys are ``/``-separated paths relative to the storage root.
    """

    @abstractmethod
    def write_bytes(self, key: str, data: bytes) -> None:
        """Write ``data`` under ``key``, replacing any previous content.

        Readers never observe a partially written artifact.
        """

    @abstractmethod
    def read_bytes(self, key: str) -> bytes:
        """Return the content stored under ``key``.

        Raises ``FileNotFoundError`` if the key does not exist.
        """

    @abstractmethod
    def exists(self, key: str) -> bool:
        """Return whether ``key`` holds an artifact."""

    @abstractmethod
    def append_line(self, key: str, line: str) -> None:
        """Append one newline-terminated line to ``key``, creating it if needed."""

    def list_keys(self, prefix: str = "", suffix: str = "") -> list[str]:
        """List keys under ``prefix`` ending with ``suffix``.

        Override in subclasses that support listing.
        Default implementation returns empty list.
        """
        return []

    def write_text(self, key: str, text: str) -> None:
        self.write_bytes(key, text.encode("utf-8"))

    def read_text(self, key: str) -> str:
        return self.read_bytes(key).decode("utf-8")

    def write_json(self, key: str, value: Any) -> None:
        self.write_text(key, json.dumps(value, indent=2, sort_keys=True) + "\n")

    def read_json(self, key: str) -> Any:
        return json.loads(self.read_text(key))

    def append_record(self, key: str, record: dict[str, Any]) -> None:
        """Append ``record`` as one NDJSON line."""
        self.append_line(key, json.dumps(record, sort_keys=True))

    def read_records(self, key: str) -> list[dict[str, Any]]:
        """All NDJSON records under ``key``; empty if the key does not exist."""
        if not self.exists(key):
            return []
        return [json.loads(line) for line in self.read_text(key).splitlines() if line.strip()]
