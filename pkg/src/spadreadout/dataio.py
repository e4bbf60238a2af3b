"""Small CSV readers and writers shared by the command-line tools."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = ["InputError", "read_columns", "write_text"]


class InputError(ValueError):
    """Malformed data file; the message carries ``file:line``."""


def read_columns(path, ncols: int):
    """Numeric columns of a CSV file as a tuple of arrays.

    Blank lines and ``#`` comments are skipped, as is one leading text header.
    """
    cols = [[] for _ in range(ncols)]
    seen_data = False
    try:
        fh = open(Path(path), newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                values = [float(row[i]) for i in range(ncols)]
            except (ValueError, IndexError):
                if not seen_data:
                    seen_data = True  # the header
                    continue
                raise InputError(f"{path}:{lineno}: expected {ncols} numeric columns") from None
            seen_data = True
            for c, v in zip(cols, values):
                c.append(v)
    if not cols[0]:
        raise InputError(f"{path}: no data rows")
    return tuple(np.array(c) for c in cols)


def write_text(path, text: str, header: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        fh.write(text)
    return path
