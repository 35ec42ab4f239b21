"""Exception hierarchy for cmota.

Library code raises these; only the CLI turns them into exit codes.
"""

from __future__ import annotations

from typing import Any


class CmotaError(Exception):
    """Base class for every error raised by cmota."""


class ConfigError(CmotaError):
    """Raised for malformed config files, unknown keys or invalid values."""


class ConfigHashMismatchError(CmotaError):
    """Raised when an artifact was produced under a different config hash."""

    def __init__(self, expected: str, found: str, artifact: str) -> None:
        super().__init__(
            f"{artifact} was produced with config {found[:12]}, "
            f"requested config is {expected[:12]} (pass --force to use it anyway)"
        )
        self.expected = expected
        self.found = found
        self.artifact = artifact


class MissingArtifactError(CmotaError):
    """Raised when a command needs an artifact a previous command should have written."""

    def __init__(self, artifact: str, hint: str) -> None:
        super().__init__(f"{artifact} not found. {hint}")
        self.artifact = artifact
        self.hint = hint


class CheckpointError(CmotaError):
    """Raised for corrupt, truncated or incompatible checkpoint containers."""


class DimensionError(CmotaError, ValueError):
    """Raised when tensor shapes do not agree."""


class TargetIndexError(CmotaError, IndexError):
    """Raised when a class/token index falls outside its table."""


class OutOfVocabularyError(CmotaError, ValueError):
    """Raised when a sentence contains a word the vocabulary does not know."""

    def __init__(self, word: str) -> None:
        super().__init__(f"word {word!r} is not in the vocabulary")
        self.word = word


class TemplateError(CmotaError):
    """Raised for missing templates or template sets too small to partition."""


class CodebookError(CmotaError):
    """Raised when a codebook cannot be fitted or a token exceeds its size."""


class NumericalError(CmotaError):
    """Raised when an op produces NaN/Inf.

    ``op`` names the producing op; ``diagnostics`` carries whatever context
    the raiser had (step, loss components, ...).
    """

    def __init__(self, op: str, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(f"{op}: {message}")
        self.op = op
        self.diagnostics = dict(diagnostics or {})


class MemoryBankError(CmotaError, ValueError):
    """Raised when a memory bundle is requested for a frame with no memory history."""


class PseudoTextError(CmotaError, ValueError):
    """Raised when a frame has no pseudo-text for the augmented loss."""
