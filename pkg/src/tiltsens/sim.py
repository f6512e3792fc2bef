"""Monte Carlo study of bias and interval coverage.

A nuisance bundle plays the role of the truth. The true arm means follow
exactly from the plug-in formula over the covariate sample; replicated
datasets are drawn from the same bundle and re-estimated from scratch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .bootstrap import CiSpec, double_bootstrap_ci, normal_ci, percentile_bootstrap
from .dataset import Dataset, make_folds
from .diagnostics import generate_semiparametric
from .estimator import EstimatorOptions, _crossfit_arm, fit_folds, fit_nuisances, psi_plugin
from .exceptions import ConfigError, TiltsensError
from .tilting import Identity, SmoothCapAbove, SmoothRampAbove, TiltSpec

log = logging.getLogger(__name__)

GAMMA1_DEFAULT = tuple(np.round(np.arange(0, 11) * 0.001, 6))
GAMMA0_DEFAULT = tuple(np.round(np.arange(-10, 1) * 0.00025, 8))
RESULT_COLUMNS = ["gamma", "n", "percent_bias", "cov_normal", "cov_percentile", "cov_double"]
MAX_FAILURE_RATE = 0.05
METHOD_COLUMN = {"normal": "cov_normal", "percentile": "cov_percentile", "double_symmetric_t": "cov_double"}


def true_psi(truth, xs, spec: TiltSpec, t: int) -> float:
    X = xs.X if isinstance(xs, Dataset) else xs
    return psi_plugin(truth, spec, t, X)


@dataclass
class SimulationConfig:
    truth: object
    xs: Dataset
    gamma1_grid: tuple = GAMMA1_DEFAULT
    gamma0_grid: tuple = GAMMA0_DEFAULT
    s1: object = field(default_factory=Identity)
    s0: object = field(default_factory=Identity)
    sizes: tuple = (1000,)
    R: int = 200
    methods: tuple = ("normal",)
    ci: CiSpec = CiSpec(B1=50, B2=50)
    K: int = 5
    seed: int = 0
    options: EstimatorOptions = EstimatorOptions()
    workers: int = 1

    def __post_init__(self):
        if self.R < 1:
            raise ConfigError("R must be at least 1")
        if any(n < 100 for n in self.sizes):
            raise ConfigError("sample sizes must be at least 100")
        unknown = set(self.methods) - set(METHOD_COLUMN)
        if unknown:
            raise ConfigError(f"unknown CI methods {sorted(unknown)}")

    def specs(self, t):
        grid, s = (self.gamma1_grid, self.s1) if t == 1 else (self.gamma0_grid, self.s0)
        return [TiltSpec(float(g), s, t) for g in grid]


def _arm_estimates(ds, K, seed, cfg):
    """Cross-fit estimates and SEs for every gamma of both arms, concatenated."""
    plan = make_folds(ds, K, seed)
    folds = fit_folds(ds, plan, EstimatorOptions(cfg.options.propensity, cfg.options.single_index,
                                                 cfg.options.huberize, cfg.options.level))
    est, se = [], []
    for t in (1, 0):
        for spec in cfg.specs(t):
            r = _crossfit_arm(folds, spec, t, ds.n, cfg.options.huberize)
            est.append(r.psi)
            se.append(math.sqrt(float(np.mean(r.phi ** 2)) / ds.n))
    return np.array(est), np.array(se)


def _replicate(job):
    cfg, n, r, seed = job
    ss = np.random.SeedSequence(seed)
    data_seed, fold_seed, boot_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    try:
        ds = generate_semiparametric(cfg.truth, cfg.xs, n, data_seed)
        est, se = _arm_estimates(ds, cfg.K, fold_seed, cfg)
        cis = {"normal": [normal_ci(e, s, cfg.ci.level) for e, s in zip(est, se)]}

        def fn(d, s):
            return _arm_estimates(d, cfg.K, s, cfg)

        spec = CiSpec(cfg.ci.method if cfg.ci.method != "normal" else "percentile", cfg.ci.level,
                      cfg.ci.B1, cfg.ci.B2, boot_seed)
        if "percentile" in cfg.methods:
            cis["percentile"] = percentile_bootstrap(ds, fn, spec)
        if "double_symmetric_t" in cfg.methods:
            cis["double_symmetric_t"] = double_bootstrap_ci(
                ds, fn, CiSpec("double_symmetric_t", spec.level, spec.B1, spec.B2, boot_seed))
    except (TiltsensError, ArithmeticError, ValueError, np.linalg.LinAlgError) as err:
        log.warning("replication %d (n=%d) failed: %s", r, n, err)
        return n, r, None
    return n, r, {"est": est, "se": se, "ci": {m: np.array(v, dtype=float) for m, v in cis.items()}}


def _jobs(cfg):
    root = np.random.SeedSequence(cfg.seed)
    per_size = root.spawn(len(cfg.sizes))
    jobs = []
    for n, ss in zip(cfg.sizes, per_size):
        for r, child in enumerate(ss.spawn(cfg.R)):
            jobs.append((cfg, int(n), r, int(child.generate_state(1)[0])))
    return jobs


@dataclass
class SimulationResult:
    tables: dict
    truth: dict
    failures: dict

    @property
    def invalid(self) -> bool:
        return any(t["invalid"].any() for t in self.tables.values())

    def to_csv(self, prefix):
        paths = []
        for t, df in self.tables.items():
            path = f"{prefix}_arm{t}.csv"
            df.to_csv(path, index=False, float_format="%.10g")
            paths.append(path)
        return paths


def run_simulation(cfg: SimulationConfig) -> SimulationResult:
    """Replicate estimation on data drawn from ``cfg.truth``.

    Returns one table per arm with columns ``gamma, n, percent_bias,
    cov_normal, cov_percentile, cov_double`` followed by mean SE, Monte
    Carlo SEs of coverage and failure counts. Methods not run are NaN.
    """
    truth = {t: np.array([true_psi(cfg.truth, cfg.xs, s, t) for s in cfg.specs(t)]) for t in (1, 0)}
    jobs = _jobs(cfg)
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=1))
    else:
        results = [_replicate(j) for j in jobs]
    results.sort(key=lambda v: (v[0], v[1]))

    g1 = len(cfg.gamma1_grid)
    tables, failures = {}, {}
    for t in (1, 0):
        sl = slice(0, g1) if t == 1 else slice(g1, None)
        specs = cfg.specs(t)
        rows = []
        for n in cfg.sizes:
            ok = [res for m, _, res in results if m == n and res is not None]
            n_fail = sum(1 for m, _, res in results if m == n and res is None)
            failures[(t, n)] = n_fail
            R_ok = len(ok)
            est = np.array([o["est"][sl] for o in ok]).reshape(R_ok, len(specs))
            se = np.array([o["se"][sl] for o in ok]).reshape(R_ok, len(specs))
            for j, spec in enumerate(specs):
                psi = truth[t][j]
                row = {"gamma": spec.gamma, "n": n,
                       "percent_bias": 100.0 * (est[:, j].mean() - psi) / psi if R_ok else np.nan}
                for method, col in METHOD_COLUMN.items():
                    if method in cfg.methods and R_ok:
                        ci = np.array([o["ci"][method][sl][j] for o in ok])
                        cov = float(np.mean((ci[:, 0] <= psi) & (psi <= ci[:, 1])))
                        row[col] = cov
                        row[f"mc_se_{col[4:]}"] = math.sqrt(cov * (1 - cov) / R_ok)
                    else:
                        row[col] = np.nan
                        row[f"mc_se_{col[4:]}"] = np.nan
                row.update(true_psi=psi, mean_estimate=est[:, j].mean() if R_ok else np.nan,
                           mean_se=se[:, j].mean() if R_ok else np.nan,
                           sd_estimate=est[:, j].std(ddof=1) if R_ok > 1 else np.nan,
                           replications=R_ok, failures=n_fail,
                           invalid=n_fail > MAX_FAILURE_RATE * cfg.R)
                rows.append(row)
        extra = ["mc_se_normal", "mc_se_percentile", "mc_se_double", "true_psi", "mean_estimate",
                 "mean_se", "sd_estimate", "replications", "failures", "invalid"]
        tables[t] = pd.DataFrame(rows, columns=RESULT_COLUMNS + extra)
    for (t, n), k in failures.items():
        if k > MAX_FAILURE_RATE * cfg.R:
            log.error("arm %d, n=%d: %d of %d replications failed; results marked invalid", t, n, k, cfg.R)
    return SimulationResult(tables, truth, failures)


# ---------------------------------------------------------------------------
# synthetic truth


def synthetic_population(n: int = 2500, seed: int = 0) -> Dataset:
    """Birth-weight-like population: age, marital status, binary smoking.

    About 15% of rows are treated; the treated arm weighs ~250 g less
    on average, with age and marriage shifting both treatment and outcome.
    """
    rng = np.random.default_rng(seed)
    age = np.clip(np.round(rng.gamma(16.0, 27.0 / 16.0, size=n)), 14, 45)
    married = (rng.random(n) < 1.0 / (1.0 + np.exp(-(-2.5 + 0.12 * age)))).astype(float)
    eta = -1.4 - 0.06 * (age - 27.0) - 1.0 * married + 0.002 * (age - 27.0) ** 2
    t = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(np.int8)
    y = 3400.0 - 250.0 * t + 12.0 * (age - 27.0) + 100.0 * married + 550.0 * rng.standard_normal(n)
    X = np.column_stack([age, married])
    return Dataset(X, t, np.round(y), ("age", "married"), (False, True))


def synthetic_truth(n_pop: int = 2500, seed: int = 0, options: EstimatorOptions | None = None):
    """Fit nuisances on a synthetic population; returns ``(bundle, population)``."""
    options = options or EstimatorOptions()
    pop = synthetic_population(n_pop, seed)
    return fit_nuisances(pop, options.propensity, options.single_index), pop


def birthweight_tilts():
    """Tilting functions used for birth weight in grams (arm 1, arm 0)."""
    return SmoothCapAbove(4000.0, 200.0), SmoothRampAbove(2000.0, 2000.0)
