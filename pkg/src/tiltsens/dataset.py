"""Observational data container, CSV ingestion and fold construction.

A :class:`Dataset` holds ``n`` rows of ``(X, T, Y)`` as numpy arrays.
Categorical covariates are expanded at load time into indicator columns
with the first (sorted) level dropped as reference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from .exceptions import InfeasibleSplitError, SchemaError, ValidationError

ROLES = ("covariate", "treatment", "outcome", "ignore")


class ObservationRecord(NamedTuple):
    x: np.ndarray
    t: int
    y: float


@dataclass(frozen=True)
class Dataset:
    """Rows of covariates ``X`` (n, p), binary treatment ``t`` and outcome ``y``.

    Attributes
    ----------
    X : ndarray of shape (n, p)
    t : ndarray of shape (n,), values in {0, 1}
    y : ndarray of shape (n,)
    covariate_names : tuple of str
        One name per column of ``X``; indicator columns are ``"col=level"``.
    indicator : tuple of bool
        True where the column only takes values in {0, 1}.
    categories : dict
        ``{base column: (levels, reference)}`` for expanded categoricals.
    """

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    covariate_names: tuple
    indicator: tuple = ()
    categories: dict = field(default_factory=dict)
    treatment_name: str = "T"
    outcome_name: str = "Y"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        t = np.asarray(self.t)
        y = np.asarray(self.y, dtype=float)
        if X.shape[0] < 1:
            raise ValidationError("dataset must contain at least one row")
        if X.shape[1] < 1:
            raise ValidationError("dataset needs at least one covariate")
        if not (len(t) == len(y) == X.shape[0]):
            raise ValidationError("X, t and y have inconsistent lengths")
        if not np.all(np.isin(t, (0, 1))):
            raise ValidationError("treatment values must be 0 or 1")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcome contains non-finite values")
        if not np.all(np.isfinite(X)):
            raise ValidationError("covariates contain non-finite values")
        names = tuple(self.covariate_names)
        if len(names) != X.shape[1]:
            raise ValidationError("covariate_names does not match X columns")
        indicator = tuple(self.indicator) or tuple(
            bool(np.all(np.isin(X[:, j], (0.0, 1.0)))) for j in range(X.shape[1])
        )
        for arr in (X, y):
            arr.setflags(write=False)
        t = t.astype(np.int8)
        t.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "indicator", indicator)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return self.n

    @property
    def rows(self):
        return [ObservationRecord(self.X[i], int(self.t[i]), float(self.y[i])) for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.X[idx], self.t[idx], self.y[idx], self.covariate_names,
            self.indicator, self.categories, self.treatment_name, self.outcome_name,
        )

    def arm(self, t: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.t == t))

    def with_outcome(self, y) -> "Dataset":
        return Dataset(
            self.X, self.t, y, self.covariate_names, self.indicator,
            self.categories, self.treatment_name, self.outcome_name,
        )

    def column_values(self, name: str) -> np.ndarray:
        """Values of a named covariate; categorical bases return level labels."""
        if name in self.covariate_names:
            return self.X[:, self.covariate_names.index(name)]
        if name in self.categories:
            levels, reference = self.categories[name]
            out = np.full(self.n, reference, dtype=object)
            for level in levels:
                if level == reference:
                    continue
                col = self.covariate_names.index(f"{name}={level}")
                out[self.X[:, col] == 1.0] = level
            return out
        raise KeyError(name)


@dataclass(frozen=True)
class SplitPlan:
    """Assignment of rows to folds ``1..K``."""

    K: int
    assignment: np.ndarray
    seed: int

    def fold(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def folds(self):
        return range(1, self.K + 1)


def _parse_schema(schema) -> dict:
    if isinstance(schema, (str, Path)):
        schema = json.loads(Path(schema).read_text())
    columns = schema.get("columns", schema)
    parsed = {}
    for name, spec in columns.items():
        if isinstance(spec, str):
            spec = {"role": spec}
        role = spec.get("role")
        if role not in ROLES:
            raise SchemaError(f"column {name!r}: unknown role {role!r}")
        kind = spec.get("kind", "numeric")
        if kind not in ("numeric", "categorical"):
            raise SchemaError(f"column {name!r}: unknown kind {kind!r}")
        parsed[name] = dict(spec, role=role, kind=kind)
    roles = [s["role"] for s in parsed.values()]
    if roles.count("treatment") != 1 or roles.count("outcome") != 1:
        raise SchemaError("schema must name exactly one treatment and one outcome column")
    if roles.count("covariate") < 1:
        raise SchemaError("schema must name at least one covariate column")
    return parsed


def _level_key(v):
    try:
        return (0, float(v), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(v))


def _is_float(v) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def load_csv(path, schema) -> Dataset:
    """Read a header-row CSV and apply a column-role schema.

    Parameters
    ----------
    path : path-like
    schema : dict or path-like
        ``{"columns": {name: {"role": ..., "kind": ...}}}``; a bare
        ``{name: role}`` mapping is also accepted.
    """
    spec = _parse_schema(schema)
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"data file not found: {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in spec if c not in df.columns]
    if missing:
        raise SchemaError(f"columns missing from {path.name}: {missing}")

    def numeric(col):
        raw = df[col].str.strip()
        if (raw == "").any():
            raise ValidationError(f"column {col!r} has missing values")
        try:
            return np.array([float(v) for v in raw], dtype=float)
        except ValueError:
            bad = next(v for v in raw if not _is_float(v))
            raise ValidationError(f"column {col!r} has non-numeric value {bad!r}") from None

    t_col = next(c for c, s in spec.items() if s["role"] == "treatment")
    y_col = next(c for c, s in spec.items() if s["role"] == "outcome")
    t = numeric(t_col)
    if not np.all(np.isin(t, (0.0, 1.0))):
        bad = t[~np.isin(t, (0.0, 1.0))][0]
        raise ValidationError(f"treatment column {t_col!r} has non-binary value {bad:g}")
    y = numeric(y_col)

    blocks, names, indicator, categories = [], [], [], {}
    for col, s in spec.items():
        if s["role"] != "covariate":
            continue
        if s["kind"] == "numeric":
            v = numeric(col)
            blocks.append(v[:, None])
            names.append(col)
            indicator.append(bool(np.all(np.isin(v, (0.0, 1.0)))))
        else:
            raw = df[col].str.strip()
            if (raw == "").any():
                raise ValidationError(f"column {col!r} has missing values")
            levels = s.get("levels") or sorted(raw.unique(), key=_level_key)
            unknown = set(raw.unique()) - set(levels)
            if unknown:
                raise ValidationError(f"column {col!r} has undeclared levels {sorted(unknown)}")
            reference = s.get("reference", levels[0])
            categories[col] = (tuple(levels), reference)
            for level in levels:
                if level == reference:
                    continue
                blocks.append((raw == level).to_numpy(dtype=float)[:, None])
                names.append(f"{col}={level}")
                indicator.append(True)
    X = np.hstack(blocks) if blocks else np.empty((len(df), 0))
    return Dataset(X, t.astype(np.int8), y, tuple(names), tuple(indicator),
                   categories, t_col, y_col)


def write_csv(ds: Dataset, path) -> dict:
    """Write ``ds`` as CSV (expanded covariates) and return a matching schema."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.covariate_names, ds.treatment_name, ds.outcome_name])
        for i in range(ds.n):
            w.writerow([*(repr(float(v)) for v in ds.X[i]), int(ds.t[i]), repr(float(ds.y[i]))])
    schema = {"columns": {name: {"role": "covariate", "kind": "numeric"} for name in ds.covariate_names}}
    schema["columns"][ds.treatment_name] = {"role": "treatment"}
    schema["columns"][ds.outcome_name] = {"role": "outcome"}
    return schema


def make_folds(ds: Dataset, K: int, seed: int) -> SplitPlan:
    """Treatment-stratified K-fold plan.

    Each arm is permuted and the two permutations are concatenated and
    dealt round-robin, so fold sizes differ by at most one and each arm
    is spread as evenly as possible.
    """
    if not 2 <= K <= ds.n:
        raise InfeasibleSplitError(f"need 2 <= K <= n, got K={K}, n={ds.n}")
    rng = np.random.default_rng(seed)
    order = []
    for arm in (1, 0):
        idx = np.flatnonzero(ds.t == arm)
        if len(idx) < K:
            raise InfeasibleSplitError(f"arm T={arm} has {len(idx)} rows, fewer than K={K}")
        order.append(rng.permutation(idx))
    order = np.concatenate(order)
    assignment = np.empty(ds.n, dtype=np.int64)
    assignment[order] = np.arange(ds.n) % K + 1
    return SplitPlan(K, assignment, seed)


def _iqr(v):
    q75, q25 = np.percentile(v, [75, 25])
    return q75 - q25


def empirical_summary(ds: Dataset) -> pd.DataFrame:
    """Per-arm covariate summary (counts, means, IQRs, category percentages).

    Rows are statistics; columns are ``treated`` (T=1) and ``control`` (T=0).
    """
    rows = []
    arms = {"treated": ds.t == 1, "control": ds.t == 0}

    def add(label, fn):
        rows.append((label, {k: (fn(m) if m.any() else np.nan) for k, m in arms.items()}))

    add("n", lambda m: int(m.sum()))
    add(f"{ds.outcome_name} mean", lambda m: ds.y[m].mean())
    expanded = {f"{base}={lvl}" for base, (lvls, _) in ds.categories.items() for lvl in lvls}
    for j, name in enumerate(ds.covariate_names):
        if name in expanded:
            continue
        col = ds.X[:, j]
        if ds.indicator[j]:
            add(f"{name} (%)", lambda m, c=col: 100.0 * c[m].mean())
        else:
            add(f"{name} mean", lambda m, c=col: c[m].mean())
            add(f"{name} IQR", lambda m, c=col: _iqr(c[m]))
    for base, (levels, _) in ds.categories.items():
        labels = ds.column_values(base)
        for level in levels:
            add(f"{base}={level} (%)", lambda m, lv=level, lab=labels: 100.0 * np.mean(lab[m] == lv))
    return pd.DataFrame({k: [r[1][k] for r in rows] for k in arms}, index=[r[0] for r in rows])
