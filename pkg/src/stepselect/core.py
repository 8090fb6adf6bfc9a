"""Domain types for step-selection data and the shared CSV exchange format.

A dataset is a set of *strata*: each stratum is one decision point made of
the observed (case) step and the control steps sampled for it.  Records are
stored column-wise in numpy arrays; :meth:`StrataDataset.records` gives the
record-oriented view when needed.

Optional per-record fields (individual / opponent ids, step length, turning
angle) are optional per column: a column is either fully present or ``None``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

CSV_FIXED_COLUMNS = ("stratum_id", "case", "id", "opp_id", "sl_", "ta_")


class DatasetError(ValueError):
    """Raised when a dataset cannot be built, parsed, or used as requested."""


@dataclass(frozen=True)
class StepRecord:
    stratum_id: int
    is_case: bool
    covariates: tuple[float, ...]
    individual_id: int | None = None
    opponent_id: int | None = None
    step_length: float | None = None
    turning_angle: float | None = None


@dataclass(frozen=True)
class Violation:
    stratum_id: int | None
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "dataset ok"
        lines = [f"{len(self.violations)} violation(s):"]
        for v in self.violations:
            where = "dataset" if v.stratum_id is None else f"stratum {v.stratum_id}"
            lines.append(f"  [{v.rule}] {where}: {v.message}")
        return "\n".join(lines)


@dataclass(frozen=True)
class StrataIndex:
    """Padded (n_strata, max_size) view of the row indices of each stratum.

    Padding slots point at the stratum's case row and are switched off in
    ``valid``; every consumer masks them before a softmax.
    """

    ids: np.ndarray
    rows: np.ndarray
    valid: np.ndarray
    case_col: np.ndarray

    @property
    def n_strata(self) -> int:
        return len(self.ids)

    @property
    def uniform(self) -> bool:
        return bool(self.valid.all())


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StrataDataset:
    """Grouped case/control step records.

    Parameters
    ----------
    stratum_id, case : arrays of shape (n,)
    X : array of shape (n, n_features)
        Covariates of each candidate step.
    feature_names : names of the covariate columns.
    individual_id, opponent_id : optional integer arrays of shape (n,)
    step_length, turning_angle : optional float arrays of shape (n,)
    n_individuals, n_opponents : vocabulary sizes of the id columns.
    centered : whether :func:`center_covariates` produced this dataset.
    offsets, scales : per-column transform applied by centering.
    """

    stratum_id: np.ndarray
    case: np.ndarray
    X: np.ndarray
    feature_names: tuple[str, ...]
    individual_id: np.ndarray | None = None
    opponent_id: np.ndarray | None = None
    step_length: np.ndarray | None = None
    turning_angle: np.ndarray | None = None
    n_individuals: int = 0
    n_opponents: int = 0
    centered: bool = False
    offsets: np.ndarray | None = field(default=None, compare=False)
    scales: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = X.shape[0]
        set_ = object.__setattr__
        set_(self, "X", _frozen(X))
        set_(self, "stratum_id", _frozen(np.asarray(self.stratum_id, dtype=np.int64)))
        set_(self, "case", _frozen(np.asarray(self.case, dtype=bool)))
        set_(self, "feature_names", tuple(self.feature_names))
        for name in ("individual_id", "opponent_id"):
            col = getattr(self, name)
            if col is not None:
                set_(self, name, _frozen(np.asarray(col, dtype=np.int64)))
        for name in ("step_length", "turning_angle"):
            col = getattr(self, name)
            if col is not None:
                set_(self, name, _frozen(np.asarray(col, dtype=float)))
        set_(self, "offsets", _frozen(self.offsets))
        set_(self, "scales", _frozen(self.scales))
        if self.individual_id is not None and not self.n_individuals:
            set_(self, "n_individuals", int(self.individual_id.max(initial=-1)) + 1)
        if self.opponent_id is not None and not self.n_opponents:
            set_(self, "n_opponents", int(self.opponent_id.max(initial=-1)) + 1)
        for name in ("stratum_id", "case", "individual_id", "opponent_id",
                     "step_length", "turning_angle"):
            col = getattr(self, name)
            if col is not None and col.shape != (n,):
                raise DatasetError(f"column {name!r} has shape {col.shape}, expected ({n},)")

    # ------------------------------------------------------------------ #

    @property
    def n_records(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_strata(self) -> int:
        return len(np.unique(self.stratum_id))

    def feature_index(self, feature: int | str) -> int:
        if isinstance(feature, str):
            try:
                return self.feature_names.index(feature)
            except ValueError:
                raise DatasetError(f"unknown feature {feature!r}") from None
        if not 0 <= feature < self.n_features:
            raise DatasetError(f"feature index {feature} out of range")
        return int(feature)

    def ids_for(self, target: str) -> np.ndarray | None:
        if target == "individual":
            return self.individual_id
        if target == "opponent":
            return self.opponent_id
        raise ValueError(f"unknown id target {target!r}")

    def vocab_for(self, target: str) -> int:
        return self.n_individuals if target == "individual" else self.n_opponents

    @cached_property
    def strata(self) -> StrataIndex:
        """Row layout grouped by stratum; requires exactly one case per stratum."""
        ids, inverse, counts = np.unique(self.stratum_id, return_inverse=True,
                                         return_counts=True)
        order = np.argsort(inverse, kind="stable")
        kmax = int(counts.max()) if len(counts) else 0
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        col = np.arange(len(order)) - np.repeat(starts, counts)
        rows = np.empty((len(ids), kmax), dtype=np.int64)
        valid = np.zeros((len(ids), kmax), dtype=bool)
        rows[inverse[order], col] = order
        valid[inverse[order], col] = True
        is_case = np.zeros_like(valid)
        is_case[inverse[order], col] = self.case[order]
        n_cases = is_case.sum(axis=1)
        if np.any(n_cases != 1):
            bad = ids[n_cases != 1][0]
            raise DatasetError(f"stratum {bad} does not have exactly one case")
        case_col = is_case.argmax(axis=1)
        case_rows = rows[np.arange(len(ids)), case_col]
        rows = np.where(valid, rows, case_rows[:, None])
        for a in (ids, rows, valid, case_col):
            a.flags.writeable = False
        return StrataIndex(ids=ids, rows=rows, valid=valid, case_col=case_col)

    def records(self) -> Iterator[StepRecord]:
        opt = lambda col, i, cast: None if col is None else cast(col[i])  # noqa: E731
        for i in range(self.n_records):
            yield StepRecord(
                stratum_id=int(self.stratum_id[i]),
                is_case=bool(self.case[i]),
                covariates=tuple(float(v) for v in self.X[i]),
                individual_id=opt(self.individual_id, i, int),
                opponent_id=opt(self.opponent_id, i, int),
                step_length=opt(self.step_length, i, float),
                turning_angle=opt(self.turning_angle, i, float),
            )

    @classmethod
    def from_records(cls, records: Sequence[StepRecord],
                     feature_names: Sequence[str] | None = None, **kw) -> StrataDataset:
        records = list(records)
        lengths = {len(r.covariates) for r in records}
        if len(lengths) > 1:
            raise DatasetError(f"records have unequal covariate lengths {sorted(lengths)}")
        n_feat = lengths.pop() if lengths else 0
        if feature_names is None:
            feature_names = [f"x{j + 1}" for j in range(n_feat)]

        def column(attr, dtype):
            vals = [getattr(r, attr) for r in records]
            present = [v is not None for v in vals]
            if not any(present):
                return None
            if not all(present):
                raise DatasetError(f"optional field {attr!r} is present on only some records")
            return np.asarray(vals, dtype=dtype)

        return cls(
            stratum_id=np.array([r.stratum_id for r in records], dtype=np.int64),
            case=np.array([r.is_case for r in records], dtype=bool),
            X=np.array([r.covariates for r in records], dtype=float).reshape(len(records), n_feat),
            feature_names=tuple(feature_names),
            individual_id=column("individual_id", np.int64),
            opponent_id=column("opponent_id", np.int64),
            step_length=column("step_length", float),
            turning_angle=column("turning_angle", float),
            **kw,
        )

    def take_strata(self, strata_ids: np.ndarray, relabel: bool = True) -> StrataDataset:
        """Return a dataset made of the given strata (repeats allowed).

        With ``relabel`` each drawn stratum gets a fresh id ``0..len-1`` so that
        repeated draws (bootstrap) stay distinct strata.
        """
        idx = self.strata
        pos = np.searchsorted(idx.ids, strata_ids)
        if np.any(pos >= len(idx.ids)) or np.any(idx.ids[np.minimum(pos, len(idx.ids) - 1)] != strata_ids):
            raise DatasetError("unknown stratum id requested")
        rows = idx.rows[pos]
        valid = idx.valid[pos]
        flat = rows[valid]
        if relabel:
            new_ids = np.repeat(np.arange(len(pos)), valid.sum(axis=1))
        else:
            new_ids = self.stratum_id[flat]
        return self._subset(flat, new_ids)

    def take_rows(self, rows: np.ndarray) -> StrataDataset:
        return self._subset(np.asarray(rows), self.stratum_id[rows])

    def _subset(self, rows: np.ndarray, stratum_ids: np.ndarray) -> StrataDataset:
        pick = lambda col: None if col is None else col[rows]  # noqa: E731
        return replace(
            self,
            stratum_id=stratum_ids,
            case=self.case[rows],
            X=self.X[rows],
            individual_id=pick(self.individual_id),
            opponent_id=pick(self.opponent_id),
            step_length=pick(self.step_length),
            turning_angle=pick(self.turning_angle),
        )

    def with_X(self, X: np.ndarray) -> StrataDataset:
        """Same strata with a replaced covariate matrix."""
        return replace(self, X=X)

    def uncentered_X(self) -> np.ndarray:
        """Invert :func:`center_covariates` using the stored offsets/scales."""
        if not self.centered:
            return np.array(self.X)
        scales = self.scales if self.scales is not None else 1.0
        return self.X * scales + self.offsets


# ---------------------------------------------------------------------- #
# Validation and preprocessing
# ---------------------------------------------------------------------- #


def validate_dataset(d: StrataDataset) -> ValidationReport:
    """Check every StrataDataset invariant and report all violations."""
    out: list[Violation] = []
    if d.X.ndim != 2 or d.X.shape[1] != len(d.feature_names):
        out.append(Violation(None, "covariate_length",
                             f"covariate matrix has shape {d.X.shape} but "
                             f"{len(d.feature_names)} feature names"))
    ids, inverse, counts = np.unique(d.stratum_id, return_inverse=True, return_counts=True)
    n_cases = np.bincount(inverse, weights=d.case.astype(float), minlength=len(ids))
    if np.any(d.stratum_id < 0):
        for s in np.unique(d.stratum_id[d.stratum_id < 0]):
            out.append(Violation(int(s), "stratum_id", "stratum ids must be >= 0"))
    for s, c in zip(ids[counts < 2], counts[counts < 2]):
        out.append(Violation(int(s), "stratum_size",
                             f"stratum has {c} record(s); needs 1 case + >= 1 control"))
    for s, c in zip(ids[n_cases != 1], n_cases[n_cases != 1]):
        out.append(Violation(int(s), "case_count",
                             f"stratum has {int(c)} cases; exactly one required"))
    bad = ~np.isfinite(d.X).all(axis=1) if d.X.size else np.zeros(d.n_records, bool)
    for s in np.unique(d.stratum_id[bad]):
        out.append(Violation(int(s), "finite", "covariates contain NaN or infinite values"))
    if d.step_length is not None:
        bad = ~(d.step_length >= 0)
        for s in np.unique(d.stratum_id[bad]):
            out.append(Violation(int(s), "step_length", "step length must be finite and >= 0"))
    if d.turning_angle is not None:
        ta = d.turning_angle
        bad = ~((ta > -math.pi) & (ta <= math.pi))
        for s in np.unique(d.stratum_id[bad]):
            out.append(Violation(int(s), "turning_angle", "turning angle must lie in (-pi, pi]"))
    for name, vocab in (("individual_id", d.n_individuals), ("opponent_id", d.n_opponents)):
        col = getattr(d, name)
        if col is None:
            continue
        bad = (col < 0) | (col >= vocab)
        for s in np.unique(d.stratum_id[bad]):
            out.append(Violation(int(s), name, f"{name} outside [0, {vocab})"))
    return ValidationReport(tuple(out))


def center_covariates(d: StrataDataset, standardize: bool = False) -> StrataDataset:
    """Subtract the pooled column means (cases and controls together).

    With ``standardize`` columns are also divided by their standard deviation
    (zero-variance columns are left unscaled).  Offsets and scales are kept on
    the result so :meth:`StrataDataset.uncentered_X` can invert the mapping.
    """
    if d.centered:
        raise DatasetError("dataset is already centered; refusing to center twice")
    offsets = d.X.mean(axis=0)
    Xc = d.X - offsets
    # second pass removes the rounding residue of the first subtraction
    resid = Xc.mean(axis=0)
    Xc = Xc - resid
    offsets = offsets + resid
    scales = None
    if standardize:
        sd = Xc.std(axis=0)
        scales = np.where(sd > 0, sd, 1.0)
        Xc = Xc / scales
    return replace(d, X=Xc, centered=True, offsets=offsets, scales=scales)


# ---------------------------------------------------------------------- #
# CSV exchange format
# ---------------------------------------------------------------------- #


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(d: StrataDataset, path: str | Path | io.TextIOBase) -> None:
    """Write ``stratum_id,case,id,opp_id,sl_,ta_,<features...>`` rows."""
    own = isinstance(path, (str, Path))
    fh = open(path, "w", encoding="utf-8", newline="") if own else path
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_FIXED_COLUMNS) + list(d.feature_names))
        opt = lambda col, i, f: "" if col is None else f(col[i])  # noqa: E731
        for i in range(d.n_records):
            w.writerow(
                [int(d.stratum_id[i]), int(d.case[i]),
                 opt(d.individual_id, i, int), opt(d.opponent_id, i, int),
                 opt(d.step_length, i, _fmt), opt(d.turning_angle, i, _fmt)]
                + [_fmt(v) for v in d.X[i]]
            )
    finally:
        if own:
            fh.close()


def read_csv(path: str | Path | io.TextIOBase, n_individuals: int = 0,
             n_opponents: int = 0) -> StrataDataset:
    """Parse the CSV exchange format.

    Empty cells mean "absent"; an optional column must be empty on every row
    or on none.  Covariate cells must all be present (``nan`` is accepted as
    text so that validation can report it).
    """
    own = isinstance(path, (str, Path))
    fh = open(path, "r", encoding="utf-8", newline="") if own else path
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("empty CSV file") from None
        if tuple(header[:6]) != CSV_FIXED_COLUMNS:
            raise DatasetError(f"CSV header must start with {','.join(CSV_FIXED_COLUMNS)}")
        features = header[6:]
        rows = [r for r in reader if r]
    finally:
        if own:
            fh.close()
    width = len(header)
    for lineno, r in enumerate(rows, start=2):
        if len(r) != width:
            raise DatasetError(f"line {lineno}: expected {width} cells, got {len(r)}")

    def column(j, dtype, name):
        cells = [r[j] for r in rows]
        empty = [c == "" for c in cells]
        if all(empty):
            return None
        if any(empty):
            raise DatasetError(f"column {name!r} is empty on some rows but not all")
        try:
            return np.array([dtype(c) for c in cells])
        except ValueError as e:
            raise DatasetError(f"column {name!r}: {e}") from None

    try:
        stratum = np.array([int(r[0]) for r in rows], dtype=np.int64)
        case = np.array([int(r[1]) for r in rows], dtype=np.int64)
        X = np.array([[float(c) for c in r[6:]] for r in rows], dtype=float)
    except ValueError as e:
        raise DatasetError(f"malformed CSV cell: {e}") from None
    if np.any((case != 0) & (case != 1)):
        raise DatasetError("column 'case' must contain only 0 or 1")
    return StrataDataset(
        stratum_id=stratum,
        case=case.astype(bool),
        X=X.reshape(len(rows), len(features)),
        feature_names=tuple(features),
        individual_id=column(2, int, "id"),
        opponent_id=column(3, int, "opp_id"),
        step_length=column(4, float, "sl_"),
        turning_angle=column(5, float, "ta_"),
        n_individuals=n_individuals,
        n_opponents=n_opponents,
    )


# ---------------------------------------------------------------------- #
# Conditional (per-stratum softmax) likelihood
# ---------------------------------------------------------------------- #


def stratum_log_softmax(scores: np.ndarray, index: StrataIndex) -> np.ndarray:
    """Log-probabilities of each candidate within its stratum, padded layout."""
    s = np.where(index.valid, scores[index.rows], -np.inf)
    m = s.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(s - m).sum(axis=1, keepdims=True))
    return s - lse


def conditional_nll(scores: np.ndarray, index: StrataIndex) -> np.ndarray:
    """Negative log-likelihood of the observed case in every stratum."""
    lp = stratum_log_softmax(np.asarray(scores, dtype=float), index)
    return -lp[np.arange(index.n_strata), index.case_col]


def mean_conditional_nll(scores: np.ndarray, index: StrataIndex) -> float:
    return float(conditional_nll(scores, index).mean())
