"""Additive logistic model for the treatment probability.

Numeric covariates get a centered cubic B-spline term with a
second-difference penalty; indicator covariates enter linearly. The fit
is penalized IRLS, and each smooth term's penalty weight is picked from a
grid by V-fold cross-validated binomial deviance (coordinate search).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import null_space
from scipy.special import expit

from .exceptions import DegenerateFitError, NonConvergenceError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropensitySettings:
    n_knots: int = 10
    penalty_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
    cv_folds: int = 5
    clip_epsilon: float = 0.01
    max_iter: int = 100
    tol: float = 1e-8
    ridge: float = 1e-8
    cycles: int = 2
    min_unique: int = 5
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: dict | None) -> "PropensitySettings":
        cfg = dict(cfg or {})
        aliases = {"knots": "n_knots", "penalty-grid": "penalty_grid", "cv-folds": "cv_folds",
                   "clip-epsilon": "clip_epsilon", "max-iter": "max_iter"}
        kw = {aliases.get(k, k).replace("-", "_"): v for k, v in cfg.items()}
        if "penalty_grid" in kw:
            kw["penalty_grid"] = tuple(float(v) for v in kw["penalty_grid"])
        return cls(**kw)


@dataclass(frozen=True)
class _SplineTerm:
    column: int
    knots: np.ndarray
    lo: float
    hi: float
    Z: np.ndarray
    S: np.ndarray

    def basis(self, x):
        x = np.clip(x, self.lo, self.hi)
        B = BSpline.design_matrix(x, self.knots, 3).toarray()
        return B @ self.Z


def _make_spline_term(j, x, n_knots):
    lo, hi = float(x.min()), float(x.max())
    probs = np.linspace(0, 1, n_knots + 2)[1:-1]
    interior = np.unique(np.quantile(x, probs))
    interior = interior[(interior > lo) & (interior < hi)]
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    B = BSpline.design_matrix(x, knots, 3).toarray()
    m = B.shape[1]
    Z = null_space(B.mean(axis=0)[None, :])
    D = np.diff(np.eye(m), n=2, axis=0)
    S = Z.T @ (D.T @ D) @ Z
    return _SplineTerm(j, knots, lo, hi, Z, S)


@dataclass(frozen=True)
class PropensityFit:
    """Fitted additive logistic model for ``P(T=1 | X)``.

    ``predict`` returns probabilities clipped to ``[eps, 1 - eps]``.
    """

    intercept: float
    linear_columns: tuple
    linear_coef: np.ndarray
    spline_terms: tuple
    spline_coef: tuple
    lambdas: tuple
    clip_epsilon: float
    p: int
    n_iter: int = 0
    cv_deviance: float = float("nan")
    trace: list = field(default_factory=list, repr=False)

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :] if self.p > 1 or X.size == 1 else X[:, None]
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[1]}")
        eta = np.full(X.shape[0], self.intercept)
        if self.linear_columns:
            eta += X[:, list(self.linear_columns)] @ self.linear_coef
        for term, coef in zip(self.spline_terms, self.spline_coef):
            eta += term.basis(X[:, term.column]) @ coef
        return eta

    def raw_predict(self, X) -> np.ndarray:
        return expit(self.linear_predictor(X))

    def predict(self, X) -> np.ndarray:
        e = self.clip_epsilon
        return np.clip(self.raw_predict(X), e, 1.0 - e)

    def clip_rate(self, X) -> float:
        raw = self.raw_predict(X)
        e = self.clip_epsilon
        return float(np.mean((raw < e) | (raw > 1.0 - e)))


def predict_pi(fit, X, t: int) -> np.ndarray:
    """``P(T=t | X)`` after clipping; the two arms sum to one."""
    p1 = fit.predict(X)
    return p1 if t == 1 else 1.0 - p1


class _Design:
    def __init__(self, X, indicator, settings):
        n, p = X.shape
        self.linear, self.splines = [], []
        for j in range(p):
            x = X[:, j]
            if (indicator and indicator[j]) or len(np.unique(x)) < settings.min_unique:
                if np.ptp(x) > 0:
                    self.linear.append(j)
            else:
                self.splines.append(_make_spline_term(j, x, settings.n_knots))
        blocks = [np.ones((n, 1)), X[:, self.linear]]
        self.slices = []
        start = 1 + len(self.linear)
        for term in self.splines:
            Bz = term.basis(X[:, term.column])
            blocks.append(Bz)
            self.slices.append(slice(start, start + Bz.shape[1]))
            start += Bz.shape[1]
        self.M = np.hstack(blocks)
        self.ridge = settings.ridge

    def penalty(self, lambdas, n):
        P = np.zeros((self.M.shape[1],) * 2)
        idx = np.arange(1, 1 + len(self.linear))
        P[idx, idx] = self.ridge * n
        for term, sl, lam in zip(self.splines, self.slices, lambdas):
            P[sl, sl] = lam * n * term.S
        return P


def _pirls(M, t, P, max_iter, tol, beta0=None):
    n, k = M.shape
    beta = np.zeros(k) if beta0 is None else beta0.copy()
    if beta0 is None:
        pbar = np.clip(t.mean(), 1e-6, 1 - 1e-6)
        beta[0] = np.log(pbar / (1 - pbar))

    def objective(b):
        eta = M @ b
        ll = np.sum(t * eta - np.logaddexp(0.0, eta))
        return -2.0 * ll + b @ P @ b

    obj = objective(beta)
    trace = []
    for it in range(1, max_iter + 1):
        eta = M @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-12)
        H = M.T @ (w[:, None] * M) + P
        grad = M.T @ (t - mu) - P @ beta
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        alpha = 1.0
        for _ in range(30):
            cand = beta + alpha * step
            new_obj = objective(cand)
            if np.isfinite(new_obj) and new_obj <= obj + 1e-12 * abs(obj):
                break
            alpha *= 0.5
        change = np.max(np.abs(cand - beta))
        trace.append((it, float(new_obj), float(change)))
        beta, obj = cand, new_obj
        if change < tol:
            return beta, it, trace
    raise NonConvergenceError(
        f"penalized IRLS did not converge in {max_iter} iterations", best=beta, trace=trace
    )


def _stratified_folds(t, V, rng):
    folds = np.empty(len(t), dtype=int)
    offset = 0
    for arm in (1, 0):
        idx = rng.permutation(np.flatnonzero(t == arm))
        folds[idx] = (np.arange(len(idx)) + offset) % V
        offset += len(idx)
    return folds


def _deviance(t, p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return -2.0 * np.sum(t * np.log(p) + (1 - t) * np.log1p(-p))


def fit_propensity(X, t, indicator=None, settings: PropensitySettings | None = None) -> PropensityFit:
    """Fit the additive logistic treatment model.

    Parameters
    ----------
    X : array of shape (n, p)
    t : array of shape (n,), binary
    indicator : sequence of bool, optional
        Columns to enter linearly (unpenalized).
    settings : PropensitySettings, optional
    """
    settings = settings or PropensitySettings()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    t = np.asarray(t, dtype=float)
    if t.min() == t.max():
        raise DegenerateFitError("treatment is constant in the training data")
    n = len(t)
    design = _Design(X, indicator, settings)
    grid = tuple(settings.penalty_grid)
    n_smooth = len(design.splines)
    lambdas = [grid[len(grid) // 2]] * n_smooth
    cv_value = float("nan")

    if n_smooth:
        rng = np.random.default_rng(settings.seed)
        V = min(settings.cv_folds, int(min(t.sum(), n - t.sum())))
        folds = _stratified_folds(t, V, rng) if V >= 2 else None
        cache = {}

        def cv(lams):
            key = tuple(lams)
            if key not in cache:
                total = 0.0
                for v in range(V):
                    tr, te = folds != v, folds == v
                    try:
                        b, _, _ = _pirls(design.M[tr], t[tr], design.penalty(lams, tr.sum()),
                                         settings.max_iter, settings.tol)
                    except NonConvergenceError:
                        total = np.inf
                        break
                    total += _deviance(t[te], expit(design.M[te] @ b))
                cache[key] = total
            return cache[key]

        if folds is not None:
            for _ in range(settings.cycles):
                changed = False
                for j in range(n_smooth):
                    scores = []
                    for lam in grid:
                        trial = list(lambdas)
                        trial[j] = lam
                        scores.append(cv(trial))
                    best = grid[int(np.argmin(scores))]
                    if best != lambdas[j]:
                        lambdas[j] = best
                        changed = True
                if not changed:
                    break
            cv_value = cv(lambdas)

    beta, n_iter, trace = _pirls(design.M, t, design.penalty(lambdas, n), settings.max_iter, settings.tol)
    nl = len(design.linear)
    return PropensityFit(
        intercept=float(beta[0]),
        linear_columns=tuple(design.linear),
        linear_coef=beta[1:1 + nl],
        spline_terms=tuple(design.splines),
        spline_coef=tuple(beta[sl] for sl in design.slices),
        lambdas=tuple(float(v) for v in lambdas),
        clip_epsilon=settings.clip_epsilon,
        p=X.shape[1],
        n_iter=n_iter,
        cv_deviance=float(cv_value),
        trace=trace,
    )


@dataclass(frozen=True)
class FunctionPropensity:
    """Propensity given by a known function of ``X`` (oracle / truth use)."""

    fn: object
    clip_epsilon: float = 0.0

    def raw_predict(self, X):
        return np.asarray(self.fn(np.asarray(X, dtype=float)), dtype=float)

    def predict(self, X):
        e = self.clip_epsilon
        raw = self.raw_predict(X)
        return np.clip(raw, e, 1 - e) if e > 0 else raw

    def clip_rate(self, X):
        e = self.clip_epsilon
        raw = self.raw_predict(X)
        return float(np.mean((raw < e) | (raw > 1 - e))) if e > 0 else 0.0
