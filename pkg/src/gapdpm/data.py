"""Recurrent-event gap-time data: records, covariate coding and CSV I/O.

The on-disk layout is long format, one row per gap time::

    subject_id,event_index,gap_time,censored,<covariate columns...>

Rows of one subject are kept in file order. ``censored`` is read from the
subject's last row only; a ``1`` on any earlier row is rejected, because a
subject can only be right-censored on its final gap.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REQUIRED_COLUMNS = ("subject_id", "event_index", "gap_time", "censored")


class DataError(ValueError):
    """Raised for malformed or inconsistent gap-time data."""


@dataclass(frozen=True)
class ColumnSpec:
    """How one raw CSV column turns into design-matrix columns.

    ``kind`` is ``"numeric"``, ``"binary"`` or ``"categorical"``. Categorical
    columns expand to one dummy per non-baseline level.
    """

    name: str
    kind: str = "numeric"
    levels: tuple[str, ...] = ()
    baseline: str | None = None
    standardize: bool = False
    mean: float | None = None
    sd: float | None = None

    def __post_init__(self):
        if self.kind not in ("numeric", "binary", "categorical"):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if len(self.levels) < 2:
                raise DataError(f"column {self.name!r}: categorical needs >= 2 levels")
            if self.baseline is not None and self.baseline not in self.levels:
                raise DataError(
                    f"column {self.name!r}: baseline {self.baseline!r} not among levels"
                )

    @property
    def base_level(self) -> str:
        return self.baseline if self.baseline is not None else self.levels[0]

    def output_names(self) -> list[str]:
        if self.kind == "categorical":
            return [f"{self.name}={lv}" for lv in self.levels if lv != self.base_level]
        return [self.name]


@dataclass(frozen=True)
class CovariateCodec:
    columns: tuple[ColumnSpec, ...] = ()

    @classmethod
    def from_config(cls, items: Iterable[dict] | None) -> "CovariateCodec":
        """Build from a list of mappings as found in a run-config file."""
        cols = []
        for item in items or ():
            item = dict(item)
            if "levels" in item:
                item["levels"] = tuple(str(v) for v in item["levels"])
            if item.get("baseline") is not None:
                item["baseline"] = str(item["baseline"])
            cols.append(ColumnSpec(**item))
        return cls(tuple(cols))

    def to_config(self) -> list[dict]:
        out = []
        for c in self.columns:
            d = {"name": c.name, "kind": c.kind}
            if c.kind == "categorical":
                d["levels"] = list(c.levels)
                d["baseline"] = c.base_level
            if c.standardize:
                d["standardize"] = True
                if c.mean is not None:
                    d["mean"], d["sd"] = c.mean, c.sd
            out.append(d)
        return out

    @property
    def names(self) -> list[str]:
        return [n for c in self.columns for n in c.output_names()]

    @property
    def q(self) -> int:
        return len(self.names)

    def fit(self, rows: Sequence[dict]) -> "CovariateCodec":
        """Return a codec with standardization moments estimated from ``rows``.

        Columns that already carry a mean/sd keep them, so a codec fitted on
        training data can be reused at prediction time.
        """
        cols = []
        for c in self.columns:
            if c.kind == "numeric" and c.standardize and c.mean is None:
                vals = np.array([_as_float(r[c.name], c.name, k) for k, r in enumerate(rows)])
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 1.0
                c = ColumnSpec(c.name, c.kind, c.levels, c.baseline, True,
                               float(vals.mean()), sd if sd > 0 else 1.0)
            cols.append(c)
        return CovariateCodec(tuple(cols))

    def encode_row(self, row: dict, rownum: int | None = None) -> np.ndarray:
        where = f" (row {rownum})" if rownum is not None else ""
        out: list[float] = []
        for c in self.columns:
            if c.name not in row:
                raise DataError(f"missing covariate column {c.name!r}{where}")
            raw = row[c.name]
            if c.kind == "numeric":
                v = _as_float(raw, c.name, rownum)
                if c.standardize:
                    if c.mean is None:
                        raise DataError(f"column {c.name!r}: codec not fitted")
                    v = (v - c.mean) / c.sd
                out.append(v)
            elif c.kind == "binary":
                v = _as_float(raw, c.name, rownum)
                if v not in (0.0, 1.0):
                    raise DataError(f"column {c.name!r}: binary value {raw!r}{where}")
                out.append(v)
            else:
                level = str(raw).strip()
                if level not in c.levels:
                    raise DataError(
                        f"column {c.name!r}: unknown level {level!r}{where}"
                    )
                out.extend(1.0 if level == lv else 0.0
                           for lv in c.levels if lv != c.base_level)
        return np.asarray(out, dtype=float)


def _as_float(raw, name, rownum) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        where = f" (row {rownum})" if rownum is not None else ""
        raise DataError(f"column {name!r}: not a number: {raw!r}{where}") from None


@dataclass(frozen=True)
class SubjectRecord:
    """Gap times of one subject.

    When ``censored`` is true the last entry of ``gap_times`` is the
    censoring residual, i.e. a lower bound on the unobserved final gap.
    """

    subject_id: str
    gap_times: np.ndarray
    censored: bool
    covariates: np.ndarray

    def __post_init__(self):
        gaps = np.asarray(self.gap_times, dtype=float).reshape(-1)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(gaps.size, -1) if gaps.size else cov.reshape(0, 0)
        object.__setattr__(self, "gap_times", gaps)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "censored", bool(self.censored))
        if gaps.size == 0:
            raise DataError(f"subject {self.subject_id!r}: no gap times")
        if not np.all(np.isfinite(gaps)) or np.any(gaps <= 0):
            raise DataError(f"subject {self.subject_id!r}: gap times must be positive and finite")
        if cov.shape[0] != gaps.size:
            raise DataError(
                f"subject {self.subject_id!r}: {cov.shape[0]} covariate rows for {gaps.size} gaps"
            )

    @property
    def n_gaps(self) -> int:
        return int(self.gap_times.size)

    @property
    def n_events(self) -> int:
        return self.n_gaps - int(self.censored)

    @property
    def log_gaps(self) -> np.ndarray:
        return np.log(self.gap_times)


@dataclass(frozen=True)
class GapTimeDataset:
    subjects: tuple[SubjectRecord, ...]
    covariate_names: tuple[str, ...] = ()
    codec: CovariateCodec = field(default_factory=CovariateCodec)

    def __post_init__(self):
        subs = tuple(self.subjects)
        object.__setattr__(self, "subjects", subs)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if not subs:
            raise DataError("dataset has no subjects")
        q = len(self.covariate_names)
        for s in subs:
            if s.covariates.shape[1] != q:
                raise DataError(
                    f"subject {s.subject_id!r}: {s.covariates.shape[1]} covariates, expected {q}"
                )
        if len({s.subject_id for s in subs}) != len(subs):
            raise DataError("duplicate subject ids")

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def q(self) -> int:
        return len(self.covariate_names)

    @property
    def J(self) -> int:
        """Largest number of gap-time rows held by one subject."""
        return max(s.n_gaps for s in self.subjects)

    @property
    def n_censored(self) -> int:
        return sum(s.censored for s in self.subjects)

    @property
    def log_gaps(self) -> list[np.ndarray]:
        return log_transform(self)

    def padded(self):
        """Return ``(Y, mask, X, censored)`` as rectangular arrays.

        ``Y`` is N x J with NaN outside each subject's gaps, ``X`` is
        N x J x q, and ``censored`` is a length-N boolean vector.
        """
        N, J, q = self.N, self.J, self.q
        Y = np.full((N, J), np.nan)
        X = np.zeros((N, J, q))
        mask = np.zeros((N, J), dtype=bool)
        for i, s in enumerate(self.subjects):
            n = s.n_gaps
            Y[i, :n] = s.log_gaps
            X[i, :n] = s.covariates
            mask[i, :n] = True
        censored = np.array([s.censored for s in self.subjects])
        return Y, mask, X, censored


def log_transform(dataset: GapTimeDataset) -> list[np.ndarray]:
    """Natural-log gap times, one array per subject."""
    return [np.log(s.gap_times) for s in dataset.subjects]


def gap_count_table(dataset: GapTimeDataset) -> dict[int, int]:
    """Map j to the number of subjects with exactly j gap times."""
    counts = Counter(s.n_gaps for s in dataset.subjects)
    return dict(sorted(counts.items()))


def from_log_gaps(log_gaps: Sequence[np.ndarray], censored: Sequence[bool] | None = None,
                  covariates: Sequence[np.ndarray] | None = None,
                  covariate_names: Sequence[str] = (), ids: Sequence[str] | None = None,
                  ) -> GapTimeDataset:
    """Build a dataset from log-scale gap sequences (used by the simulators)."""
    n = len(log_gaps)
    censored = censored if censored is not None else [False] * n
    ids = ids if ids is not None else [str(i + 1) for i in range(n)]
    q = len(covariate_names)
    subs = []
    for i, y in enumerate(log_gaps):
        y = np.asarray(y, dtype=float)
        cov = (np.asarray(covariates[i], dtype=float) if covariates is not None
               else np.zeros((y.size, q)))
        subs.append(SubjectRecord(ids[i], np.exp(y), censored[i], cov))
    return GapTimeDataset(tuple(subs), tuple(covariate_names))


def load_csv(path, codec: CovariateCodec | None = None) -> GapTimeDataset:
    """Read a long-format gap-time CSV file.

    Parameters
    ----------
    path : path-like
        CSV file with a header row.
    codec : CovariateCodec, optional
        Covariate coding. Without one the file must carry no covariates
        beyond the required columns (extra columns are ignored).

    Returns
    -------
    GapTimeDataset
    """
    codec = codec or CovariateCodec()
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataError(f"missing required column {col!r}")
        for c in codec.columns:
            if c.name not in header:
                raise DataError(f"missing covariate column {c.name!r}")
        rows = list(reader)

    codec = codec.fit(rows)
    groups: dict[str, list[tuple[int, dict]]] = {}
    for k, row in enumerate(rows, start=2):  # row 1 is the header
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"row {k}: wrong number of fields")
        sid = row["subject_id"].strip()
        gap = _as_float(row["gap_time"], "gap_time", k)
        if not np.isfinite(gap) or gap <= 0:
            raise DataError(f"row {k}: gap_time must be positive, got {row['gap_time']!r}")
        if row["censored"].strip() not in ("0", "1"):
            raise DataError(f"row {k}: censored must be 0 or 1, got {row['censored']!r}")
        groups.setdefault(sid, []).append((k, row))

    subjects = []
    for sid, items in groups.items():
        for k, row in items[:-1]:
            if row["censored"].strip() == "1":
                raise DataError(f"row {k}: subject {sid!r} censored before its last gap")
        gaps = np.array([float(r["gap_time"]) for _, r in items])
        cov = (np.vstack([codec.encode_row(r, k) for k, r in items])
               if codec.columns else np.zeros((len(items), 0)))
        censored = items[-1][1]["censored"].strip() == "1"
        subjects.append(SubjectRecord(sid, gaps, censored, cov))
    if not subjects:
        raise DataError(f"{path}: no data rows")
    return GapTimeDataset(tuple(subjects), tuple(codec.names), codec)


def write_csv(dataset: GapTimeDataset, path) -> None:
    """Write ``dataset`` in the long CSV format.

    Encoded covariates are written under their design-matrix names; a dataset
    written this way re-loads with a codec of plain numeric columns. Floats
    are written with 17 significant digits so a reload is exact.
    """
    names = list(dataset.covariate_names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + names)
        for s in dataset.subjects:
            for j, gap in enumerate(s.gap_times):
                last = j == s.n_gaps - 1
                cens = int(s.censored and last)
                w.writerow([s.subject_id, j + 1, repr(float(gap)), cens]
                           + [repr(float(v)) for v in s.covariates[j]])


def numeric_codec(names: Sequence[str]) -> CovariateCodec:
    return CovariateCodec(tuple(ColumnSpec(n) for n in names))
