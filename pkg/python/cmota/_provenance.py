"""Code-version provenance for artifacts."""

from __future__ import annotations

from pathlib import Path


def get_git_commit_sha(rootdir: str | Path) -> str | None:
    """Get the current HEAD commit SHA from git.

    Returns None if git is unavailable, not a repo, or any error occurs.
    """
    import subprocess

    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=rootdir,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if result.returncode == 0:
            return result.stdout.strip()
    except (subprocess.TimeoutExpired, FileNotFoundError, OSError):
        pass
    return None


def code_version(rootdir: str | Path | None = None) -> dict[str, str | None]:
    """Package version plus git HEAD (``None`` outside a checkout)."""
    from cmota import __version__

    root = Path(rootdir) if rootdir is not None else Path(__file__).resolve().parent
    return {"version": __version__, "git_commit": get_git_commit_sha(root)}
