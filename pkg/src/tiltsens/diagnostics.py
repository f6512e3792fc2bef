"""Goodness-of-fit diagnostics and synthetic data generators.

Synthetic data are drawn from a fitted nuisance bundle: covariates from an
empirical sample, ``T`` from the fitted propensity, ``Y`` by inverse-CDF
sampling from the fitted arm-specific conditional law. Subgroup
distributions of real and synthetic data are then compared with
two-sample Kolmogorov-Smirnov statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import Dataset
from .exceptions import ConfigError, ValidationError
from .propensity import PropensitySettings, _pirls

log = logging.getLogger(__name__)

_CHUNK_ROWS = 2000


def ks_statistic(a, b) -> float:
    """``sup_y |F_a(y) - F_b(y)|`` over the pooled sample points."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValidationError("KS statistic needs two nonempty samples")
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _covariates(xs):
    if isinstance(xs, Dataset):
        return xs.X, xs
    X = np.asarray(xs, dtype=float)
    return (X[:, None] if X.ndim == 1 else X), None


def _wrap(X, t, y, template):
    if template is None:
        names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
        return Dataset(X, t, y, names)
    return Dataset(X, t, y, template.covariate_names, template.indicator, template.categories,
                   template.treatment_name, template.outcome_name)


def sample_outcomes(law, X, rng) -> np.ndarray:
    """Draw one ``Y`` per row of ``X`` from a discrete conditional law.

    Uses the left-continuous inverse of the step CDF, so a uniform draw
    that lands exactly on a jump goes to the smaller outcome.
    """
    support = np.asarray(law.support, dtype=float)
    order = np.argsort(support, kind="stable")
    ys = support[order]
    out = np.empty(X.shape[0])
    for i0 in range(0, X.shape[0], _CHUNK_ROWS):
        W = law.weights(X[i0:i0 + _CHUNK_ROWS])[:, order]
        cdf = np.cumsum(W, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random(W.shape[0])
        j = (cdf < u[:, None]).sum(axis=1)
        out[i0:i0 + _CHUNK_ROWS] = ys[np.minimum(j, len(ys) - 1)]
    return out


def generate_semiparametric(nb, xs, n: int, seed) -> Dataset:
    """Synthetic sample of size ``n`` from a nuisance bundle.

    Parameters
    ----------
    nb : NuisanceBundle
    xs : Dataset or array
        Covariates to resample from (their empirical law).
    n : int
    seed : int or SeedSequence
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    Xall, template = _covariates(xs)
    rng = np.random.default_rng(seed)
    X = Xall[rng.integers(0, Xall.shape[0], size=n)]
    p1 = nb.pi(X, 1)
    t = (rng.random(n) < p1).astype(np.int8)
    y = np.empty(n)
    for arm in (1, 0):
        rows = np.flatnonzero(t == arm)
        if rows.size:
            y[rows] = sample_outcomes(nb.outcome[arm], X[rows], rng)
    return _wrap(X, t, y, template)


@dataclass(frozen=True)
class ParametricBaseline:
    """Logistic treatment model plus a normal linear outcome model per arm."""

    logit_coef: np.ndarray
    outcome_coef: dict
    outcome_sd: dict

    def pi1(self, X):
        A = np.column_stack([np.ones(len(X)), X])
        return 1.0 / (1.0 + np.exp(-(A @ self.logit_coef)))


def fit_parametric_baseline(ds: Dataset) -> ParametricBaseline:
    A = np.column_stack([np.ones(ds.n), ds.X])
    settings = PropensitySettings()
    P = np.eye(A.shape[1]) * settings.ridge * ds.n
    P[0, 0] = 0.0
    coef, _, _ = _pirls(A, ds.t.astype(float), P, settings.max_iter, settings.tol)
    oc, sd = {}, {}
    for arm in (0, 1):
        rows = ds.t == arm
        b, *_ = np.linalg.lstsq(A[rows], ds.y[rows], rcond=None)
        resid = ds.y[rows] - A[rows] @ b
        dof = max(int(rows.sum()) - A.shape[1], 1)
        oc[arm], sd[arm] = b, math.sqrt(float(resid @ resid) / dof)
    return ParametricBaseline(coef, oc, sd)


def generate_parametric(base: ParametricBaseline, xs, n: int, seed) -> Dataset:
    Xall, template = _covariates(xs)
    rng = np.random.default_rng(seed)
    X = Xall[rng.integers(0, Xall.shape[0], size=n)]
    t = (rng.random(n) < base.pi1(X)).astype(np.int8)
    A = np.column_stack([np.ones(n), X])
    y = np.empty(n)
    for arm in (0, 1):
        rows = t == arm
        y[rows] = A[rows] @ base.outcome_coef[arm] + base.outcome_sd[arm] * rng.standard_normal(rows.sum())
    return _wrap(X, t, y, template)


# ---------------------------------------------------------------------------
# subgroup comparisons


@dataclass(frozen=True)
class Subgroup:
    """Predicate on one named covariate: a closed range or a set of levels."""

    name: str
    column: str
    range: tuple | None = None
    levels: tuple | None = None

    @classmethod
    def from_config(cls, cfg: dict) -> "Subgroup":
        try:
            column = cfg["column"]
        except KeyError:
            raise ConfigError("subgroup needs a 'column'") from None
        rng = tuple(float(v) for v in cfg["range"]) if "range" in cfg else None
        levels = tuple(str(v) for v in cfg["levels"]) if "levels" in cfg else None
        if (rng is None) == (levels is None):
            raise ConfigError(f"subgroup on {column!r} needs exactly one of 'range' or 'levels'")
        return cls(cfg.get("name", column), column, rng, levels)

    def mask(self, ds: Dataset) -> np.ndarray:
        v = ds.column_values(self.column)
        if self.range is not None:
            v = v.astype(float)
            return (v >= self.range[0]) & (v <= self.range[1])
        if v.dtype.kind in "fiu":
            # numeric column: "1" and 1.0 name the same level
            try:
                return np.isin(v.astype(float), [float(x) for x in self.levels])
            except ValueError:
                raise ConfigError(f"subgroup on {self.column!r}: non-numeric level for a numeric column") from None
        return np.isin(v.astype(str), self.levels)


GOF_COLUMNS = ["subgroup", "n_observed", "n_synthetic", "treated_fraction_abs_diff", "ks_treated",
               "ks_control", "evaluable"]


def _compare(obs: Dataset, syn: Dataset, g: Subgroup):
    mo, ms = g.mask(obs), g.mask(syn)
    row = {"subgroup": g.name, "n_observed": int(mo.sum()), "n_synthetic": int(ms.sum())}
    if not mo.any() or not ms.any():
        row.update(treated_fraction_abs_diff=np.nan, ks_treated=np.nan, ks_control=np.nan,
                   evaluable=False)
        return row
    row["treated_fraction_abs_diff"] = abs(float(obs.t[mo].mean()) - float(syn.t[ms].mean()))
    ok = True
    for arm, key in ((1, "ks_treated"), (0, "ks_control")):
        a = obs.y[mo & (obs.t == arm)]
        b = syn.y[ms & (syn.t == arm)]
        if a.size and b.size:
            row[key] = ks_statistic(a, b)
        else:
            row[key] = np.nan
            ok = False
    row["evaluable"] = ok
    return row


def gof_report(ds: Dataset, nb, subgroups, n_synth: int, seed, generator=None) -> pd.DataFrame:
    """KS comparison of observed and synthetic subgroup distributions.

    ``treated_fraction_abs_diff`` is the absolute difference of subgroup
    treated fractions (a scalar stand-in for comparing conditional
    treatment probabilities). ``generator(n, seed) -> Dataset`` overrides
    the default semiparametric generator.
    """
    subgroups = [g if isinstance(g, Subgroup) else Subgroup.from_config(g) for g in subgroups]
    if not subgroups:
        raise ValidationError("no subgroups given")
    if generator is None:
        syn = generate_semiparametric(nb, ds, n_synth, seed)
    else:
        syn = generator(n_synth, seed)
    return pd.DataFrame([_compare(ds, syn, g) for g in subgroups], columns=GOF_COLUMNS)
