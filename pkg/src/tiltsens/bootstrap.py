"""Normal, percentile and double (symmetric-t) bootstrap intervals.

The resampling routines are generic: ``data`` is a :class:`Dataset` or an
array whose first axis indexes rows, and estimators are callables
``fn(data, seed) -> (estimate, se)`` where both may be arrays (one entry
per quantity), so a whole grid of estimates can share each resample.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import Dataset
from .exceptions import CalibrationError, ConfigError, ValidationError

log = logging.getLogger(__name__)

METHODS = ("normal", "percentile", "double_symmetric_t")
CALIBRATION_GRID = tuple(np.round(np.concatenate([np.arange(0.80, 0.99, 0.01), [0.99, 0.995]]), 3))
MAX_DROP_RATE = 0.20


class Interval(tuple):
    """``(lo, hi)`` pair that also carries how many replicates were dropped."""

    def __new__(cls, lo, hi, dropped=0):
        obj = super().__new__(cls, (float(lo), float(hi)))
        obj.dropped = int(dropped)
        return obj

    @property
    def lo(self):
        return self[0]

    @property
    def hi(self):
        return self[1]


@dataclass(frozen=True)
class CiSpec:
    method: str = "normal"
    level: float = 0.95
    B1: int = 250
    B2: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown CI method {self.method!r}")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.B1 < 2 or (self.method == "double_symmetric_t" and self.B2 < 2):
            raise ConfigError("bootstrap sizes must be at least 2")

    @classmethod
    def from_config(cls, cfg: dict | None) -> "CiSpec":
        cfg = dict(cfg or {})
        return cls(**{k.replace("-", "_"): v for k, v in cfg.items()})


def _take(data, idx):
    if isinstance(data, Dataset):
        return data.subset(idx)
    return np.asarray(data)[idx]


def _nrows(data):
    return data.n if isinstance(data, Dataset) else len(data)


def resample(data, seed):
    """Nonparametric bootstrap resample of rows (``n`` draws with replacement)."""
    rng = np.random.default_rng(seed)
    n = _nrows(data)
    return _take(data, rng.integers(0, n, size=n))


def normal_ci(est: float, se: float, level: float = 0.95) -> Interval:
    if se < 0:
        raise ValidationError("standard error must be nonnegative")
    z = norm.ppf(0.5 + 0.5 * level)
    return Interval(est - z * se, est + z * se)


def percentile_ci(replicates, level: float = 0.95) -> Interval:
    """Type-7 empirical quantiles at ``(1 -/+ level) / 2``; NaNs are dropped."""
    r = np.asarray(replicates, dtype=float).ravel()
    ok = np.isfinite(r)
    dropped = int((~ok).sum())
    if dropped:
        log.warning("percentile interval: dropped %d non-finite replicate(s)", dropped)
    r = r[ok]
    if r.size < 2:
        raise ValidationError("percentile interval needs at least two finite replicates")
    lo, hi = np.quantile(r, [0.5 - 0.5 * level, 0.5 + 0.5 * level])
    return Interval(lo, hi, dropped)


def _call(fn, data, seed):
    est, se = fn(data, seed)
    return np.atleast_1d(np.asarray(est, dtype=float)), np.atleast_1d(np.asarray(se, dtype=float))


def _seeds(seed, count):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def bootstrap_replicates(data, fn, B: int, seed: int):
    """Estimates and SEs on ``B`` resamples; shape ``(B, q)`` each."""
    n = _nrows(data)
    seeds = _seeds(seed, B)
    est, se = [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        e, v = _call(fn, _take(data, rng.integers(0, n, size=n)), s)
        est.append(e)
        se.append(v)
    return np.array(est), np.array(se)


def percentile_bootstrap(data, fn, spec: CiSpec) -> list:
    """Percentile intervals, one per quantity returned by ``fn``."""
    est, _ = bootstrap_replicates(data, fn, spec.B1, spec.seed)
    return [percentile_ci(est[:, j], spec.level) for j in range(est.shape[1])]


def _achieved_coverage(T_outer, T_inner, grid):
    # T_outer: (B1,), T_inner: (B1, B2) with NaN for dropped inner draws
    q = np.stack([np.nanquantile(T_inner, a, axis=1) for a in grid], axis=1)
    return np.mean(T_outer[:, None] <= q, axis=0)


def calibrate_level(T_outer, T_inner, level, grid=CALIBRATION_GRID) -> float:
    """Nominal inner level whose achieved coverage matches ``level``.

    Achieved coverage is evaluated on ``grid`` and linearly interpolated.
    """
    grid = np.asarray(grid, dtype=float)
    cov = _achieved_coverage(T_outer, T_inner, grid)
    cov = np.maximum.accumulate(cov)
    if level <= cov[0]:
        return float(grid[0])
    if level >= cov[-1]:
        return float(grid[-1])
    j = int(np.searchsorted(cov, level, side="left"))
    c0, c1 = cov[j - 1], cov[j]
    a0, a1 = grid[j - 1], grid[j]
    return float(a1 if c1 == c0 else a0 + (level - c0) * (a1 - a0) / (c1 - c0))


def _degenerate(se):
    return ~np.isfinite(se) | (se <= 0)


def double_bootstrap_ci(data, estimator_fn, spec: CiSpec, batch_fn=None) -> list:
    """Symmetric-t intervals calibrated by a second bootstrap level.

    Parameters
    ----------
    data : Dataset or array
    estimator_fn : callable ``(data, seed) -> (est, se)``
    spec : CiSpec
    batch_fn : callable, optional
        ``(data, idx) -> (est, se)`` for an index matrix ``idx`` of shape
        ``(B, n)``, returning arrays of shape ``(B, q)``. Used instead of
        ``estimator_fn`` for the resamples when given.

    Returns
    -------
    list of Interval, one per quantity.
    """
    n = _nrows(data)
    est0, se0 = _call(estimator_fn, data, spec.seed)
    q = est0.size
    outer_seeds = _seeds(spec.seed, spec.B1)

    def run(idx_rows, seeds):
        if batch_fn is not None:
            e, s = batch_fn(data, idx_rows)
            return np.asarray(e, dtype=float).reshape(len(idx_rows), q), np.asarray(s, dtype=float).reshape(len(idx_rows), q)
        out = [_call(estimator_fn, _take(data, r), sd) for r, sd in zip(idx_rows, seeds)]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    T_out = np.full((spec.B1, q), np.nan)
    T_in = np.full((spec.B1, spec.B2, q), np.nan)
    for b, s in enumerate(outer_seeds):
        rng = np.random.default_rng(s)
        idx_b = rng.integers(0, n, size=n)
        e_b, s_b = run(idx_b[None, :], [s])
        e_b, s_b = e_b[0], s_b[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            T_out[b] = np.where(_degenerate(s_b), np.nan, np.abs(e_b - est0) / s_b)
        inner_idx = idx_b[rng.integers(0, n, size=(spec.B2, n))]
        inner_seeds = [int(v) for v in rng.integers(0, 2**63 - 1, size=spec.B2)]
        e_c, s_c = run(inner_idx, inner_seeds)
        with np.errstate(divide="ignore", invalid="ignore"):
            T_in[b] = np.where(_degenerate(s_c), np.nan, np.abs(e_c - e_b) / s_c)

    out = []
    for j in range(q):
        if se0[j] == 0.0 and np.all(np.isnan(T_out[:, j])):
            out.append(Interval(est0[j], est0[j]))
            continue
        if not (np.isfinite(se0[j]) and se0[j] >= 0):
            raise CalibrationError("degenerate standard error on the original sample")
        inner_bad = np.mean(np.isnan(T_in[:, :, j]), axis=1) > MAX_DROP_RATE
        keep = ~np.isnan(T_out[:, j]) & ~inner_bad
        dropped = int((~keep).sum())
        if dropped > MAX_DROP_RATE * spec.B1:
            raise CalibrationError(
                f"{dropped} of {spec.B1} outer replicates had degenerate standard errors"
            )
        if dropped:
            log.info("double bootstrap: dropped %d outer replicate(s)", dropped)
        alpha = calibrate_level(T_out[keep, j], T_in[keep, :, j], spec.level)
        t_cal = float(np.quantile(T_out[keep, j], alpha))
        out.append(Interval(est0[j] - t_cal * se0[j], est0[j] + t_cal * se0[j], dropped))
    return out


def mean_estimator(x, seed=None):
    """Sample mean and its standard error (reference estimator for tests/demos)."""
    x = np.asarray(x, dtype=float)
    return x.mean(), x.std(ddof=1) / math.sqrt(len(x))


def mean_estimator_batch(x, idx):
    x = np.asarray(x, dtype=float)
    s = x[idx]
    return s.mean(axis=1), s.std(axis=1, ddof=1) / math.sqrt(idx.shape[1])
