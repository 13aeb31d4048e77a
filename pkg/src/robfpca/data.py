"""Longitudinal datasets on a common time grid with arbitrary missingness."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

LONG_HEADER = ["case_id", "time", "value"]


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is the 1-based offending line when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """``n`` cases observed on a subset of a common grid of ``p`` times.

    ``values`` holds NaN wherever ``mask`` is False.
    """

    grid: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    case_ids: tuple

    def __post_init__(self):
        p = self.grid.size
        if self.values.shape != self.mask.shape or self.values.shape[1] != p:
            raise ValueError("values, mask and grid shapes disagree")
        if len(self.case_ids) != self.values.shape[0]:
            raise ValueError("one case id per row is required")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise ValueError("observed cells must be finite")
        if np.any(~self.mask.any(axis=1)):
            bad = [self.case_ids[i] for i in np.nonzero(~self.mask.any(axis=1))[0][:5]]
            raise ValueError(f"cases without observations: {bad}")
        for arr in (self.grid, self.values, self.mask):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, grid, values, mask=None, case_ids=None):
        """Build a dataset, deriving the mask from NaNs when not given.

        Columns with no observed cell are dropped with a warning.
        """
        values = np.array(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("values must be a 2-D array")
        grid = np.array(grid, dtype=float)
        mask = np.isfinite(values) if mask is None else (np.array(mask, dtype=bool) & np.isfinite(values))
        keep = mask.any(axis=0)
        if not keep.all():
            warnings.warn(f"dropping {int((~keep).sum())} grid points with no observations", stacklevel=2)
            grid, values, mask = grid[keep], values[:, keep], mask[:, keep]
        values = np.where(mask, values, np.nan)
        if case_ids is None:
            case_ids = tuple(str(i) for i in range(values.shape[0]))
        return cls(grid=grid, values=values, mask=mask, case_ids=tuple(case_ids))

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    @property
    def n_observed(self):
        return int(self.mask.sum())

    @property
    def decimation_rate(self):
        return self.n_observed / (self.n * self.p)

    @property
    def is_complete(self):
        return bool(self.mask.all())

    def index_sets(self):
        return index_sets(self)

    def with_values(self, values):
        """Copy with new cell values (missing cells stay missing)."""
        return LongitudinalDataset.from_arrays(self.grid, values, self.mask, self.case_ids)


def index_sets(data: LongitudinalDataset):
    """Observed columns per case (``J``) and observed cases per column (``I``)."""
    J = [np.flatnonzero(row) for row in data.mask]
    I = [np.flatnonzero(col) for col in data.mask.T]
    return J, I


def _parse_float(token, what, line):
    try:
        value = float(token)
    except ValueError:
        raise DataFormatError(f"non-numeric {what} {token!r}", line) from None
    return value


def load_csv(path, grid_path=None):
    """Read a dataset from CSV.

    Two layouts are accepted. The long format has header
    ``case_id,time,value`` and one observed cell per row. The matrix format
    has header ``case_id,v1,...,vp``, one case per row, ``NaN`` (or an empty
    field) for missing cells, and needs ``grid_path``: a file with one time
    per line, optionally headed ``time``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(field.strip() for field in r)]
    if not rows:
        raise DataFormatError(f"{path} is empty")
    header = [h.strip() for h in rows[0][1]]
    if header == LONG_HEADER:
        return _load_long(rows[1:])
    if header and header[0] == "case_id" and len(header) > 1:
        if grid_path is None:
            raise DataFormatError("matrix-format CSV needs a grid file", rows[0][0])
        return _load_matrix(rows[1:], len(header) - 1, _load_grid(grid_path))
    raise DataFormatError(f"unrecognised header {','.join(header)!r}", rows[0][0])


def _load_long(rows):
    if not rows:
        raise DataFormatError("no data rows")
    cells = {}
    order = {}
    times = set()
    for line, r in rows:
        if len(r) != 3:
            raise DataFormatError(f"expected 3 fields, got {len(r)}", line)
        case = r[0].strip()
        t = _parse_float(r[1], "time", line)
        v = _parse_float(r[2], "value", line)
        if not (math.isfinite(t) and math.isfinite(v)):
            raise DataFormatError("time and value must be finite", line)
        if (case, t) in cells:
            raise DataFormatError(f"duplicate cell ({case}, {r[1].strip()}), first seen on line {cells[(case, t)][1]}", line)
        cells[(case, t)] = (v, line)
        order.setdefault(case, len(order))
        times.add(t)
    grid = np.array(sorted(times))
    col = {t: j for j, t in enumerate(grid.tolist())}
    values = np.full((len(order), grid.size), np.nan)
    for (case, t), (v, _) in cells.items():
        values[order[case], col[t]] = v
    return LongitudinalDataset.from_arrays(grid, values, case_ids=tuple(order))


def _load_grid(grid_path):
    with Path(grid_path).open(encoding="utf-8") as fh:
        lines = [(i + 1, ln.strip()) for i, ln in enumerate(fh) if ln.strip()]
    if lines and lines[0][1] == "time":
        lines = lines[1:]
    if not lines:
        raise DataFormatError(f"grid file {grid_path} is empty")
    return np.array([_parse_float(tok, "time", ln) for ln, tok in lines])


def _load_matrix(rows, p, grid):
    if grid.size != p:
        raise DataFormatError(f"grid file has {grid.size} times but the header has {p} value columns")
    if not rows:
        raise DataFormatError("no data rows")
    ids, values, seen = [], [], {}
    for line, r in rows:
        if len(r) != p + 1:
            raise DataFormatError(f"expected {p + 1} fields, got {len(r)}", line)
        case = r[0].strip()
        if case in seen:
            raise DataFormatError(f"duplicate case {case!r}, first seen on line {seen[case]}", line)
        seen[case] = line
        vals = []
        for tok in r[1:]:
            tok = tok.strip()
            vals.append(np.nan if tok == "" or tok.lower() == "nan" else _parse_float(tok, "value", line))
        ids.append(case)
        values.append(vals)
    return LongitudinalDataset.from_arrays(grid, np.array(values), case_ids=tuple(ids))


def write_csv(data: LongitudinalDataset, path):
    """Write the long format (one observed cell per row)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LONG_HEADER)
        for i, case in enumerate(data.case_ids):
            for j in np.flatnonzero(data.mask[i]):
                w.writerow([case, repr(float(data.grid[j])), repr(float(data.values[i, j]))])


def decimate(data: LongitudinalDataset, d, seed=None):
    """Keep each cell independently with probability ``d``.

    One uniform draw per cell decides its fate, so masks from the same seed
    are nested in ``d``. A case left with no cell keeps the cell with the
    smallest draw, which preserves the nesting; an emptied grid point is
    treated the same way so the grid is kept.
    """
    if not 0.0 < d <= 1.0:
        raise ValueError("keep probability d must lie in (0, 1]")
    if not data.is_complete:
        raise ValueError("decimate expects complete data")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(data.values.shape)
    if d == 1.0:
        return data
    mask = u < d
    empty = ~mask.any(axis=1)
    mask[np.flatnonzero(empty), np.argmin(u[empty], axis=1)] = True
    empty = ~mask.any(axis=0)
    mask[np.argmin(u[:, empty], axis=0), np.flatnonzero(empty)] = True
    return LongitudinalDataset.from_arrays(data.grid, data.values, mask, data.case_ids)


def from_matrix(values, grid=None, case_ids: Sequence | None = None):
    values = np.asarray(values, dtype=float)
    if grid is None:
        grid = np.linspace(0.0, 1.0, values.shape[1])
    return LongitudinalDataset.from_arrays(grid, values, case_ids=case_ids)
