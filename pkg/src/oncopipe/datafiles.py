"""Location and parsing helpers for the bundled data tables.

All reference data ships inside the package under ``oncopipe/data``.  The
ONCO_DATA_DIR environment variable points the whole stack at an alternate
directory with the same file layout (code tables, lexicons, profiles,
gold corpus).
"""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path


def data_dir() -> Path:
    """Resolve the active data directory (ONCO_DATA_DIR or bundled)."""
    override = os.environ.get("ONCO_DATA_DIR")
    if override:
        return Path(override)
    return Path(str(resources.files("oncopipe") / "data"))


def data_path(name: str) -> Path:
    return data_dir() / name


def read_tsv(path: Path) -> list[list[str]]:
    """Read a tab-separated file, skipping blank lines and # comments.

    Cells are stripped of surrounding whitespace; rows keep their column
    count so callers can enforce their own arity.
    """
    rows: list[list[str]] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rows.append([cell.strip() for cell in line.split("\t")])
    return rows
