"""Delimited numeric tables with a units header, and atomic file writes.

Layout::

    # <title>
    # units <u_1> <u_2> ...
    <c_1>\t<c_2>\t...
    <row>...

Values are written with ``repr`` so re-reading reproduces them exactly.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np


class TableFormatError(ValueError):
    pass


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_table(columns, units, rows, title: str | None = None) -> str:
    if len(columns) != len(units):
        raise ValueError("one unit per column is required")
    for name in list(columns) + list(units):
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"column names and units must be non-empty without whitespace: {name!r}")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(columns):
        raise ValueError(f"{rows.shape[1]} values per row but {len(columns)} columns")
    lines = [f"# {title}"] if title else []
    lines.append("# units " + " ".join(units))
    lines.append("\t".join(columns))
    for row in rows if rows.size else []:
        lines.append("\t".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def write_table(path, columns, units, rows, title: str | None = None):
    atomic_write(path, format_table(columns, units, rows, title))


def read_table(path):
    """Return ``(columns, units, data)``."""
    units, columns, rows = None, None, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("# units "):
                units = line[len("# units "):].split()
            elif line.startswith("#") or not line.strip():
                continue
            elif columns is None:
                columns = line.split("\t")
            else:
                try:
                    rows.append([float(v) for v in line.split("\t")])
                except ValueError as exc:
                    raise TableFormatError(f"{path}:{lineno}: {exc}") from None
                if len(rows[-1]) != len(columns):
                    raise TableFormatError(f"{path}:{lineno}: expected {len(columns)} fields")
    if units is None or columns is None:
        raise TableFormatError(f"{path}: missing units or column header")
    if len(units) != len(columns):
        raise TableFormatError(f"{path}: {len(units)} units for {len(columns)} columns")
    data = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    return columns, units, data


def write_manifest(path, manifest: dict):
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def tril_columns(prefix: str, names):
    """Column names of a packed lower triangle, row by row."""
    return [f"{prefix}_{names[i]}_{names[j]}" for i in range(len(names)) for j in range(i + 1)]


def tril_values(M):
    M = np.asarray(M)
    i, j = np.tril_indices(M.shape[-1])
    return M[..., i, j]


def from_tril(values, n: int):
    """Rebuild symmetric matrices from row-wise lower-triangle values."""
    values = np.asarray(values, dtype=float)
    i, j = np.tril_indices(n)
    M = np.zeros(values.shape[:-1] + (n, n))
    M[..., i, j] = values
    M[..., j, i] = values
    return M
