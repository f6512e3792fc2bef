"""Plug-in, influence-function and cross-fit estimators of ``E[Y(t)]``.

For arm ``t`` with tilt ``exp(gamma * s(y))`` the target is

    psi_t = E[ mu_t(Y; X) pi_t(X) + mu_t(Y e; X) / mu_t(e; X) * pi_{1-t}(X) ]

where ``mu_t(g; x) = E[g(Y) | T=t, X=x]`` and ``e = exp(gamma s(Y))``.
The one-step estimator averages ``nu = phi + psi(P_hat)`` where ``phi`` is
the efficient influence function. ``nu`` does not depend on the plug-in
value, so a fold estimate is just the (Huberized) mean of ``nu``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .dataset import Dataset, SplitPlan
from .exceptions import NumericalError, TiltsensError, ValidationError
from .outcome_cdf import SingleIndexSettings, fit_single_index
from .propensity import PropensitySettings, fit_propensity, predict_pi
from .tilting import TiltSpec, exp_tilt

log = logging.getLogger(__name__)

CLIP_WARN_RATE = 0.10


@dataclass(frozen=True)
class NuisanceBundle:
    """Propensity model plus one conditional outcome law per arm.

    ``outcome[t]`` must expose ``support`` and ``weights(X)``.
    """

    propensity: object
    outcome: dict

    def pi(self, X, t: int) -> np.ndarray:
        return predict_pi(self.propensity, X, t)


def fit_nuisances(ds: Dataset, prop_settings: PropensitySettings | None = None,
                  si_settings: SingleIndexSettings | None = None) -> NuisanceBundle:
    prop = fit_propensity(ds.X, ds.t, ds.indicator, prop_settings)
    outcome = {}
    for t in (0, 1):
        rows = ds.t == t
        outcome[t] = fit_single_index(ds.X[rows], ds.y[rows], si_settings, arm=t)
    return NuisanceBundle(prop, outcome)


# ---------------------------------------------------------------------------
# array-level pieces


@dataclass
class ArmEval:
    """Nuisance values for arm ``t`` at a fixed set of evaluation rows.

    The kernel weights and propensities do not depend on ``gamma``; holding
    them here lets one nuisance fit serve a whole grid of tilts.
    """

    t: int
    W: np.ndarray
    support: np.ndarray
    pi_t: np.ndarray
    pi_o: np.ndarray
    y: np.ndarray | None = None
    is_t: np.ndarray | None = None
    mu_y: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mu_y = self.W @ self.support

    @classmethod
    def build(cls, nb: NuisanceBundle, t: int, X, y=None, T=None) -> "ArmEval":
        X = np.asarray(X, dtype=float)
        fit = nb.outcome[t]
        W = fit.weights(X)
        pi_t = nb.pi(X, t)
        pi_o = nb.pi(X, 1 - t)
        is_t = None if T is None else (np.asarray(T) == t)
        yy = None if y is None else np.asarray(y, dtype=float)
        return cls(t, W, np.asarray(fit.support, dtype=float), pi_t, pi_o, yy, is_t)

    def moments(self, spec: TiltSpec):
        """``(mu(e), mu(Y e))`` at every evaluation row."""
        e = exp_tilt(spec, self.support)
        return self.W @ e, self.W @ (self.support * e)

    def plugin_terms(self, spec: TiltSpec) -> np.ndarray:
        mu_e, mu_ye = self.moments(spec)
        return self.mu_y * self.pi_t + (mu_ye / mu_e) * self.pi_o

    def nu(self, spec: TiltSpec) -> np.ndarray:
        """Uncentred influence values ``phi + psi(P_hat)`` per row."""
        if self.y is None or self.is_t is None:
            raise ValidationError("influence values need observed T and Y")
        mu_e, mu_ye = self.moments(spec)
        y = self.y
        e_obs = np.ones_like(y)
        if np.any(self.is_t):
            e_obs[self.is_t] = exp_tilt(spec, y[self.is_t])
        ratio = self.pi_o / self.pi_t
        treated = y + y * ratio * e_obs / mu_e - ratio * e_obs * mu_ye / (mu_e * mu_e)
        out = np.where(self.is_t, treated, mu_ye / mu_e)
        if not np.all(np.isfinite(out)):
            raise NumericalError("non-finite influence value")
        return out


def psi_plugin(nb: NuisanceBundle, spec: TiltSpec, t: int, xs) -> float:
    """Plug-in value of the identifying formula over the covariate sample ``xs``."""
    xs = np.asarray(xs, dtype=float)
    if xs.shape[0] == 0:
        raise ValidationError("covariate sample is empty")
    return float(np.mean(ArmEval.build(nb, t, xs).plugin_terms(spec)))


def eif(records, nb: NuisanceBundle, spec: TiltSpec, t: int, psi: float):
    """Efficient influence function ``phi_t(P_hat)`` at observations.

    ``records`` is a :class:`Dataset`, a single ``ObservationRecord`` or a
    sequence of them. Returns a float for a single record.
    """
    single = hasattr(records, "x") and not isinstance(records, Dataset)
    if isinstance(records, Dataset):
        X, T, Y = records.X, records.t, records.y
    else:
        recs = [records] if single else list(records)
        X = np.vstack([np.atleast_1d(np.asarray(r.x, dtype=float)) for r in recs])
        T = np.array([r.t for r in recs])
        Y = np.array([r.y for r in recs], dtype=float)
    phi = ArmEval.build(nb, t, X, Y, T).nu(spec) - psi
    return float(phi[0]) if single else phi


def onestep(nb: NuisanceBundle, spec: TiltSpec, t: int, data: Dataset) -> float:
    return float(np.mean(ArmEval.build(nb, t, data.X, data.y, data.t).nu(spec)))


# ---------------------------------------------------------------------------
# Huberization


def huber_threshold(values) -> float:
    """Root ``tau`` of ``sum(min(v**2, tau**2)) / tau**2 = log(n)``.

    The left side is nonincreasing in ``tau``. Returns 0 when all values
    are zero and ``inf`` when the equation has no root (no truncation).
    """
    v = np.abs(np.asarray(values, dtype=float))
    n = v.size
    if n < 2:
        raise ValidationError("Huber threshold needs at least two values")
    target = math.log(n)
    vmax = float(v.max())
    if vmax == 0.0:
        return 0.0
    if np.count_nonzero(v) <= target:
        return math.inf
    sq = v * v
    ss = float(sq.sum())
    if ss / (vmax * vmax) >= target:
        return math.sqrt(ss / target)

    def f(tau):
        return float(np.minimum(sq, tau * tau).sum()) / (tau * tau) - target

    lo, hi = 0.0, vmax
    while hi - lo > 1e-9 * hi:
        mid = 0.5 * (lo + hi)
        if mid == 0.0 or f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def huberize(values, tau: float) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if tau == 0.0:
        return v.copy()
    return np.sign(v) * np.minimum(np.abs(v), tau)


# ---------------------------------------------------------------------------
# cross-fitting


@dataclass(frozen=True)
class EstimatorOptions:
    propensity: PropensitySettings = PropensitySettings()
    single_index: SingleIndexSettings = SingleIndexSettings()
    huberize: bool = True
    level: float = 0.95
    clip_warn_rate: float = CLIP_WARN_RATE
    workers: int = 1


@dataclass
class FoldFit:
    k: int
    rows: np.ndarray
    bundle: NuisanceBundle
    arms: dict
    clip_rate: float


class FoldFitError(TiltsensError):
    def __init__(self, k, cause):
        super().__init__(f"nuisance fit failed on fold {k}: {cause}")
        self.k = k
        self.cause = cause


def _fit_fold(ds: Dataset, plan: SplitPlan, k: int, opts: EstimatorOptions) -> FoldFit:
    test = plan.fold(k)
    try:
        nb = fit_nuisances(ds.subset(plan.complement(k)), opts.propensity, opts.single_index)
    except TiltsensError as err:
        raise FoldFitError(k, err) from err
    Xk, Tk, Yk = ds.X[test], ds.t[test], ds.y[test]
    arms = {t: ArmEval.build(nb, t, Xk, Yk, Tk) for t in (0, 1)}
    return FoldFit(k, test, nb, arms, nb.propensity.clip_rate(Xk))


def _fit_fold_star(args):
    return _fit_fold(*args)


def fit_folds(ds: Dataset, plan: SplitPlan, opts: EstimatorOptions | None = None) -> list:
    """Fit nuisances on every fold complement (``gamma``-free, reusable)."""
    opts = opts or EstimatorOptions()
    jobs = [(ds, plan, k, opts) for k in plan.folds()]
    if opts.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=opts.workers) as pool:
            return list(pool.map(_fit_fold_star, jobs))
    return [_fit_fold_star(j) for j in jobs]


@dataclass
class ArmResult:
    psi: float
    phi: np.ndarray
    fold_estimates: list
    fold_plugins: list
    taus: list
    n_truncated: list


def _crossfit_arm(folds, spec: TiltSpec, t: int, n: int, huber: bool) -> ArmResult:
    phi = np.empty(n)
    ests, plugins, taus, ntr = [], [], [], []
    for ff in folds:
        ae = ff.arms[t]
        nu = ae.nu(spec)
        plug = float(np.mean(ae.plugin_terms(spec)))
        phi[ff.rows] = nu - plug
        if huber:
            tau = huber_threshold(nu)
            nu_h = huberize(nu, tau)
            ntr.append(int(np.sum(np.abs(nu) > tau)))
        else:
            tau, nu_h = math.inf, nu
            ntr.append(0)
        ests.append(float(np.mean(nu_h)))
        plugins.append(plug)
        taus.append(tau)
    return ArmResult(float(np.mean(ests)), phi, ests, plugins, taus, ntr)


def variance_psi(eif_values) -> float:
    """``(1/n) * sum phi**2`` over all folds; pass per-fold arrays or one array."""
    if isinstance(eif_values, np.ndarray):
        parts = [eif_values.ravel()]
    else:
        parts = [np.ravel(np.asarray(v, dtype=float)) for v in eif_values]
    allv = np.concatenate(parts) if parts else np.empty(0)
    if allv.size == 0:
        raise ValidationError("no influence values")
    return float(np.mean(allv * allv))


def standard_error(eif_values) -> float:
    n = sum(np.size(v) for v in eif_values) if not isinstance(eif_values, np.ndarray) else eif_values.size
    return math.sqrt(variance_psi(eif_values) / n)


@dataclass
class EstimateReport:
    """Cross-fit estimates for one ``(spec1, spec0)`` pair."""

    psi_tilde: dict
    ace: float
    se: dict
    ci: dict
    per_fold: pd.DataFrame
    gamma: tuple
    phi: dict = field(repr=False, default_factory=dict)
    clip_rate: float = 0.0
    warnings: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"gamma1": self.gamma[0].gamma, "gamma0": self.gamma[1].gamma,
               "psi1": self.psi_tilde[1], "psi0": self.psi_tilde[0], "ace": self.ace,
               "se_psi1": self.se["psi1"], "se_psi0": self.se["psi0"], "se_ace": self.se["ace"]}
        for q, methods in self.ci.items():
            for m, (lo, hi) in methods.items():
                out[f"{q}_{m}_lo"], out[f"{q}_{m}_hi"] = lo, hi
        return out


def _check_specs(spec1, spec0):
    if spec1.arm != 1 or spec0.arm != 0:
        raise ValidationError("spec1 must be for arm 1 and spec0 for arm 0")


def report_from_folds(folds, n: int, spec1: TiltSpec, spec0: TiltSpec,
                      opts: EstimatorOptions | None = None) -> EstimateReport:
    from .bootstrap import normal_ci

    opts = opts or EstimatorOptions()
    _check_specs(spec1, spec0)
    res = {t: _crossfit_arm(folds, spec, t, n, opts.huberize) for t, spec in ((1, spec1), (0, spec0))}
    psi = {t: res[t].psi for t in (0, 1)}
    ace = psi[1] - psi[0]
    d = res[1].phi - res[0].phi
    se = {
        "psi1": math.sqrt(variance_psi(res[1].phi) / n),
        "psi0": math.sqrt(variance_psi(res[0].phi) / n),
        "ace": math.sqrt(variance_psi(d) / n),
    }
    ci = {
        "psi1": {"normal": normal_ci(psi[1], se["psi1"], opts.level)},
        "psi0": {"normal": normal_ci(psi[0], se["psi0"], opts.level)},
        "ace": {"normal": normal_ci(ace, se["ace"], opts.level)},
    }
    rows = []
    for i, ff in enumerate(folds):
        for t in (1, 0):
            r = res[t]
            rows.append({"fold": ff.k, "arm": t, "n_eval": len(ff.rows), "estimate": r.fold_estimates[i],
                         "plugin": r.fold_plugins[i], "tau": r.taus[i], "n_truncated": r.n_truncated[i],
                         "clip_rate": ff.clip_rate})
    clip = float(np.average([ff.clip_rate for ff in folds], weights=[len(ff.rows) for ff in folds]))
    warnings = []
    if clip > opts.clip_warn_rate:
        msg = f"{100 * clip:.1f}% of propensity predictions were clipped"
        log.warning(msg)
        warnings.append(msg)
    return EstimateReport(psi, ace, se, ci, pd.DataFrame(rows), (spec1, spec0),
                          {1: res[1].phi, 0: res[0].phi}, clip, warnings)


def crossfit_estimate(ds: Dataset, plan: SplitPlan, spec1: TiltSpec, spec0: TiltSpec,
                      opts: EstimatorOptions | None = None, folds=None) -> EstimateReport:
    """Cross-fit one-step estimate of both arm means and the ACE.

    Parameters
    ----------
    ds, plan : Dataset and its fold plan
    spec1, spec0 : tilts for arm 1 and arm 0
    opts : EstimatorOptions, optional
    folds : list of FoldFit, optional
        Pre-computed fold fits (from :func:`fit_folds`) to reuse.
    """
    opts = opts or EstimatorOptions()
    if len(plan.assignment) != ds.n:
        raise ValidationError("split plan does not match the dataset")
    folds = folds if folds is not None else fit_folds(ds, plan, opts)
    return report_from_folds(folds, ds.n, spec1, spec0, opts)


def remainder(nb_tilde: NuisanceBundle, nb_true: NuisanceBundle, spec: TiltSpec, t: int, xs) -> float:
    """Empirical mean over ``xs`` of the second-order remainder integrand.

    With ``e = exp(gamma s(Y))`` and tildes marking the perturbed law:

        {mu(Ye) mu~(e) - mu~(Ye) mu(e)} / {pi~_t mu~(e)}
          * {pi~_{1-t} pi_t / mu~(e) - pi_{1-t} pi~_t / mu(e)}
    """
    xs = np.asarray(xs, dtype=float)
    a = ArmEval.build(nb_tilde, t, xs)
    b = ArmEval.build(nb_true, t, xs)
    me_a, mye_a = a.moments(spec)
    me_b, mye_b = b.moments(spec)
    first = (mye_b * me_a - mye_a * me_b) / (a.pi_t * me_a)
    second = a.pi_o * b.pi_t / me_a - b.pi_o * a.pi_t / me_b
    return float(np.mean(first * second))


def induced_mean(psi_hat: float, ds: Dataset, t: int) -> float:
    """Implied ``E[Y(t) | T = 1-t]`` from an estimate of ``E[Y(t)]``."""
    arm = ds.t == t
    p_t = float(arm.mean())
    if p_t == 0.0 or p_t == 1.0:
        raise ZeroDivisionError("induced mean needs both arms present")
    return (psi_hat - float(ds.y[arm].mean()) * p_t) / (1.0 - p_t)


# ---------------------------------------------------------------------------
# gamma grids


GRID_COLUMNS = ["gamma1", "gamma0", "psi1", "psi0", "ace", "se_ace", "ci_method", "ci_lo", "ci_hi",
                "classification"]


def classify(lo: float, hi: float, lower_is_worse: bool = True) -> str:
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return "failed"
    if hi < 0:
        return "worse" if lower_is_worse else "better"
    if lo > 0:
        return "better" if lower_is_worse else "worse"
    return "indeterminate"


@dataclass
class GridReport:
    table: pd.DataFrame
    reports: dict
    failures: list

    @property
    def complete(self) -> bool:
        return not self.failures

    def to_csv(self, path):
        self.table.to_csv(path, index=False, float_format="%.10g")


def sensitivity_grid(ds: Dataset, plan: SplitPlan, gamma1_grid, gamma0_grid, s1, s0,
                     opts: EstimatorOptions | None = None, folds=None, ci_methods=("normal",),
                     boot=None, lower_is_worse: bool = True) -> GridReport:
    """Cross-fit estimates over every ``(gamma1, gamma0)`` pair.

    Fold nuisances are fit once and reused for every cell. Extra CI
    methods (``percentile``, ``double_symmetric_t``) come from ``boot``, a
    callable ``boot(cells, method) -> {cell: (lo, hi)}``.
    """
    opts = opts or EstimatorOptions()
    folds = folds if folds is not None else fit_folds(ds, plan, opts)
    rows, reports, failures = [], {}, []
    extra = {}
    cells = [(float(g1), float(g0)) for g1 in gamma1_grid for g0 in gamma0_grid]
    for method in ci_methods:
        if method == "normal":
            continue
        try:
            extra[method] = boot(cells, method) if boot is not None else {}
        except TiltsensError as err:
            log.error("%s intervals failed: %s", method, err)
            failures.append(("*", method, str(err)))
            extra[method] = {}
    for g1, g0 in cells:
        spec1, spec0 = TiltSpec(g1, s1, 1), TiltSpec(g0, s0, 0)
        try:
            rep = report_from_folds(folds, ds.n, spec1, spec0, opts)
        except TiltsensError as err:
            log.error("cell (%g, %g) failed: %s", g1, g0, err)
            failures.append(((g1, g0), "all", str(err)))
            for method in ci_methods:
                rows.append([g1, g0, np.nan, np.nan, np.nan, np.nan, method, np.nan, np.nan, "failed"])
            continue
        reports[(g1, g0)] = rep
        for method in ci_methods:
            if method == "normal":
                lo, hi = rep.ci["ace"]["normal"]
            else:
                lo, hi = extra[method].get((g1, g0), (np.nan, np.nan))
                if not np.isfinite(lo) and not any(f[1] == method for f in failures):
                    failures.append(((g1, g0), method, "interval unavailable"))
            rows.append([g1, g0, rep.psi_tilde[1], rep.psi_tilde[0], rep.ace, rep.se["ace"], method,
                         lo, hi, classify(lo, hi, lower_is_worse)])
    return GridReport(pd.DataFrame(rows, columns=GRID_COLUMNS), reports, failures)
