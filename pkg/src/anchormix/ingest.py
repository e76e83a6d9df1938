"""Accelerometer feature extraction and CSV dataset loading."""

from __future__ import annotations

import csv
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Dataset
from .errors import DegenerateSeriesError, ParseError, SchemaError, ValidationError

FEATURE_COLUMNS = ("f1", "f2", "f3")
GROUP_COLUMNS = ("group", "activity")
_TRIAL_NAME = re.compile(r"^([A-Z]\d{2})_")


@dataclass(frozen=True)
class TriaxialSeries:
    """One trial of triaxial acceleration samples, shape (T, 3)."""

    samples: np.ndarray
    trial_id: str = ""
    activity: str = ""

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3:
            raise ValidationError(f"trial {self.trial_id!r}: samples must be T x 3, got {s.shape}")
        if s.shape[0] < 2:
            raise ValidationError(f"trial {self.trial_id!r}: need at least 2 samples")
        if not np.all(np.isfinite(s)):
            raise ValidationError(f"trial {self.trial_id!r}: non-finite sample")
        object.__setattr__(self, "samples", s)


def smv(samples: np.ndarray) -> np.ndarray:
    """Signal magnitude vector sqrt(x^2 + y^2 + z^2) per sample."""
    return np.sqrt(np.einsum("ij,ij->i", samples, samples))


def smv_features(series: TriaxialSeries) -> np.ndarray:
    """(log max SMV, log min SMV, log max |SMV_t - SMV_{t-1}|), natural log."""
    mag = smv(series.samples)
    jump = np.max(np.abs(np.diff(mag)))
    if jump <= 0.0:
        raise DegenerateSeriesError(f"trial {series.trial_id!r}: SMV is constant")
    low = mag.min()
    if low <= 0.0:
        raise DegenerateSeriesError(f"trial {series.trial_id!r}: SMV reaches zero")
    return np.log([mag.max(), low, jump])


# ---------------------------------------------------------------------------
# Raw trial files
# ---------------------------------------------------------------------------


def read_trial(path, scale: float = 1.0, columns: Sequence[int] = (0, 1, 2)) -> TriaxialSeries:
    """Parse a trial text file of comma-separated readings, one sample per line.

    Lines may end with ';'.  ``columns`` picks the accelerometer channels and
    ``scale`` converts raw counts to the desired unit (1.0 keeps raw counts).
    """
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip().rstrip(";").strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            try:
                rows.append([float(fields[c]) for c in columns])
            except IndexError:
                raise SchemaError(f"{path.name}: line {lineno} has {len(fields)} fields") from None
            except ValueError:
                col = next(c for c in columns if not _is_number(fields[c]))
                raise ParseError(f"{path.name}: bad value at line {lineno}, field {col + 1}",
                                 row=lineno, column=col + 1) from None
    if not rows:
        raise SchemaError(f"{path.name}: no samples")
    m = _TRIAL_NAME.match(path.name)
    return TriaxialSeries(scale * np.array(rows), trial_id=path.stem, activity=m.group(1) if m else "")


def _is_number(s: str) -> bool:
    try:
        return math.isfinite(float(s))
    except ValueError:
        return False


def _features_for(args):
    path, scale, columns = args
    series = read_trial(path, scale, columns)
    return series.trial_id, series.activity, smv_features(series)


def extract_features(paths: Iterable, scale: float = 1.0, columns: Sequence[int] = (0, 1, 2),
                     workers: int = 1) -> list:
    """[(trial id, activity, features)] in input order."""
    jobs = [(Path(p), scale, tuple(columns)) for p in paths]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_features_for, jobs))
    return [_features_for(j) for j in jobs]


def write_feature_csv(rows: Sequence, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "activity") + FEATURE_COLUMNS)
        for trial, activity, f in rows:
            w.writerow([trial, activity] + [repr(float(v)) for v in f])


# ---------------------------------------------------------------------------
# Generic CSV datasets
# ---------------------------------------------------------------------------


def load_dataset(path, value_columns: Sequence[str] | None = None, id_column: str = "id",
                 group_column: str | None = None) -> Dataset:
    """Read a header-first CSV into a Dataset.

    Values come from ``value_columns`` if given, otherwise from every column
    other than the id and group columns.  The group column defaults to
    'group' or 'activity' when present.  Row numbers in errors are 1-based
    data rows; column numbers are 1-based file columns.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path.name}: empty file") from None
        body = [r for r in reader if any(c.strip() for c in r)]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path.name}: duplicate column names")
    if group_column is None:
        group_column = next((g for g in GROUP_COLUMNS if g in header), None)
    elif group_column not in header:
        raise SchemaError(f"{path.name}: no column named {group_column!r}")
    has_id = id_column in header
    if value_columns is None:
        value_columns = [h for h in header if h not in (id_column, group_column)]
    missing = [c for c in value_columns if c not in header]
    if missing or not value_columns:
        raise SchemaError(f"{path.name}: value columns {missing or '[]'} not found")
    vidx = [header.index(c) for c in value_columns]
    if not body:
        raise SchemaError(f"{path.name}: no data rows")
    values = np.empty((len(body), len(vidx)))
    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise SchemaError(f"{path.name}: data row {r} has {len(row)} fields, header has {len(header)}")
        for j, c in enumerate(vidx):
            cell = row[c].strip()
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise ParseError(f"{path.name}: missing or non-numeric value at row {r}, column {c + 1} "
                                 f"({header[c]})", row=r, column=c + 1)
            values[r - 1, j] = v
    ids = tuple(row[header.index(id_column)].strip() for row in body) if has_id else ()
    groups = tuple(row[header.index(group_column)].strip() for row in body) if group_column else None
    return Dataset(values, ids, groups)


def write_dataset(data: Dataset, path, value_names: Sequence[str] | None = None) -> None:
    """Write a Dataset as CSV with full float precision."""
    if value_names is None:
        value_names = ["y"] if data.p == 1 else [f"y{j + 1}" for j in range(data.p)]
    if len(value_names) != data.p:
        raise ValidationError("one name per value column is required")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + (["group"] if data.groups is not None else []) + list(value_names))
        for i in range(data.n):
            lead = [data.ids[i]] + ([data.groups[i]] if data.groups is not None else [])
            w.writerow(lead + [repr(float(v)) for v in data.points[i]])


def load_galaxies() -> Dataset:
    """The 82 galaxy velocities (1000 km/s) bundled with the package."""
    with resources.as_file(resources.files("anchormix") / "data" / "galaxies.csv") as p:
        return load_dataset(p)
