"""
CSV ingestion and emission.

Inputs are plain comma-separated files with a header row; lines starting
with ``#`` are comments.  Outputs are written atomically (temporary file
in the target directory, then rename) and start with a comment header
recording package version, seed, a hash of the run configuration and a
timestamp.  Floats are written with 17 significant digits.
"""

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import CsvFormatError, InputError

FIELD_COLUMNS = ("x", "y", "t", "value")


def _version():
    from . import __version__

    return __version__


@dataclass
class Table:
    path: str
    columns: list
    rows: list  # list of lists of str
    lines: list  # source line number of each row


def read_table(path, required=None):
    """
    Read a headed CSV, skipping blank and ``#`` lines.  Rows must have as
    many fields as the header; ``required`` columns must be present.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    columns, rows, lines = None, [], []
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            fields = next(csv.reader([text]))
            if columns is None:
                columns = [c.strip() for c in fields]
                missing = [c for c in (required or ()) if c not in columns]
                if missing:
                    raise CsvFormatError(path, lineno, 1, f"missing column(s) {missing}")
                continue
            if len(fields) != len(columns):
                raise CsvFormatError(path, lineno, min(len(fields), len(columns)) + 1,
                                     f"expected {len(columns)} fields, found {len(fields)}")
            rows.append([f.strip() for f in fields])
            lines.append(lineno)
    if columns is None:
        raise CsvFormatError(path, 1, 1, "empty file (no header)")
    return Table(str(path), columns, rows, lines)


def column(table, name, missing_ok=False, integer=False):
    """Numeric column; empty cells become NaN when ``missing_ok``."""
    j = table.columns.index(name)
    out = np.empty(len(table.rows))
    for i, row in enumerate(table.rows):
        cell = row[j]
        if cell == "" or cell.lower() == "nan":
            if not missing_ok:
                raise CsvFormatError(table.path, table.lines[i], j + 1, f"missing {name}")
            out[i] = np.nan
            continue
        try:
            v = float(cell)
        except ValueError:
            raise CsvFormatError(table.path, table.lines[i], j + 1,
                                 f"cannot parse {cell!r} as a number") from None
        if not math.isfinite(v) or (integer and v != int(v)):
            raise CsvFormatError(table.path, table.lines[i], j + 1, f"invalid {name} {cell!r}")
        out[i] = v
    return out.astype(int) if integer else out


@dataclass
class FieldData:
    """Observations grouped by day: ``coords`` (m, 2) and ``values`` (days, m)."""

    coords: np.ndarray
    days: np.ndarray
    values: np.ndarray  # NaN where missing

    def day(self, t):
        i = int(np.flatnonzero(self.days == t)[0])
        v = self.values[i]
        ok = np.isfinite(v)
        return self.coords[ok], v[ok], np.flatnonzero(ok)


def read_field_csv(path):
    """Field CSV ``x,y,t,value``; an empty value means missing."""
    tab = read_table(path, FIELD_COLUMNS)
    x, y = column(tab, "x"), column(tab, "y")
    t = column(tab, "t", integer=True)
    v = column(tab, "value", missing_ok=True)
    if not len(tab.rows):
        raise CsvFormatError(tab.path, 2, 1, "no data rows")
    sites, site_idx = np.unique(np.column_stack([x, y]), axis=0, return_inverse=True)
    days, day_idx = np.unique(t, return_inverse=True)
    values = np.full((days.size, len(sites)), np.nan)
    seen = np.zeros_like(values, dtype=bool)
    for r, (di, si) in enumerate(zip(day_idx.ravel(), site_idx.ravel())):
        if seen[di, si]:
            raise CsvFormatError(tab.path, tab.lines[r], 1,
                                 f"duplicate observation for site ({x[r]}, {y[r]}) on day {t[r]}")
        seen[di, si] = True
        values[di, si] = v[r]
    return FieldData(sites, days, values)


def pool_adjacent_days(field, t, min_obs):
    """
    Observations for day ``t``; if fewer than ``min_obs`` sites are observed,
    the days before and after are added (same site observed on several of
    those days contributes once per day).
    Returns ``(coords, values)``.
    """
    xy, v, _ = field.day(t)
    if v.size >= min_obs:
        return xy, v
    parts_xy, parts_v = [xy], [v]
    for s in (t - 1, t + 1):
        if np.any(field.days == s):
            a, b, _ = field.day(s)
            parts_xy.append(a)
            parts_v.append(b)
    return np.vstack(parts_xy), np.concatenate(parts_v)


def read_covariate_csv(path):
    """Covariate CSV ``x,y,cov1..covK`` -> (coords, matrix, names)."""
    tab = read_table(path, ("x", "y"))
    names = [c for c in tab.columns if c not in ("x", "y")]
    if not names:
        raise CsvFormatError(tab.path, 1, 3, "no covariate columns")
    xy = np.column_stack([column(tab, "x"), column(tab, "y")])
    X = np.column_stack([column(tab, c) for c in names])
    return xy, X, names


def match_sites(coords, reference, tol=1e-9):
    """Index into ``reference`` of every row of ``coords``; error if any is absent."""
    ref = {tuple(np.round(p / tol).astype(np.int64)): i for i, p in enumerate(reference)}
    out = np.empty(len(coords), dtype=int)
    for i, p in enumerate(coords):
        key = tuple(np.round(p / tol).astype(np.int64))
        if key not in ref:
            raise InputError(f"site ({p[0]}, {p[1]}) has no covariate row")
        out[i] = ref[key]
    return out


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v if math.isfinite(v) else ("nan" if math.isnan(v) else
                                                     ("inf" if v > 0 else "-inf"))
    return str(v)


def write_csv(path, columns, rows, seed=None, config=None, extra=None):
    """
    Atomically write ``rows`` (sequences or dicts keyed by ``columns``)
    with the comment header.  The timestamp is the last header line, so
    reruns differ only there.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"# tghrf {_version()}", f"# seed: {seed}",
              f"# config: {config_hash(config or {})}"]
    for k, v in (extra or {}).items():
        header.append(f"# {k}: {v}")
    header.append(f"# created: {datetime.now(timezone.utc).isoformat(timespec='seconds')}")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            for line in header:
                fh.write(line + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                if isinstance(row, dict):
                    row = [row.get(c, "") for c in columns]
                w.writerow([format_value(v) for v in row])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_field_csv(path, coords, frames_values, days=None, **kw):
    """Write one or more days of values on common coordinates as ``x,y,t,value``."""
    vals = np.atleast_2d(frames_values)
    days = np.arange(1, len(vals) + 1) if days is None else days
    rows = []
    for t, v in zip(days, vals):
        for (x, y), val in zip(coords, v):
            rows.append([float(x), float(y), int(t), float(val) if np.isfinite(val) else ""])
    return write_csv(path, list(FIELD_COLUMNS), rows, **kw)
