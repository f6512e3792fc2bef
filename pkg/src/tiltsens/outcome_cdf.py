"""Single-index kernel estimator of the conditional outcome CDF.

Within one treatment arm, ``P(Y <= y | X = x)`` is modelled as a function
of ``y`` and the index ``x @ beta`` with ``beta[0] = 1``. Fitting has two
stages:

1. ``(beta, h)`` minimise a leave-one-out criterion built from a
   fourth-order kernel. The criterion integrates squared indicator
   residuals against the empirical law of ``Y``.
2. The delivered CDF is a Nadaraya-Watson weighted ECDF with a Gaussian
   (second-order) kernel at bandwidth ``h * n**(-4/45)``.

Any object exposing ``support`` (outcome values) and ``weights(X)`` (rows
summing to one over ``support``) can stand in for a fitted model; the
moment helpers below only use that protocol.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate, optimize

from .exceptions import NonConvergenceError, UndefinedWindowError, ValidationError
from .tilting import TiltSpec, exp_tilt

log = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_BLOCK_ELEMS = 2_000_000
_MIN_DENOMINATOR = 1e-12
_EMPTY_WINDOW = 1e-300
STAGE2_EXPONENT = -4.0 / 45.0


def gaussian_kernel(v):
    v = np.asarray(v, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * v * v)


def gaussian_kernel4(v):
    """Fourth-order Gaussian kernel ``(3 - v**2)/2 * phi(v)``."""
    v = np.asarray(v, dtype=float)
    return 0.5 * (3.0 - v * v) * gaussian_kernel(v)


KERNELS = {2: gaussian_kernel, 4: gaussian_kernel4}


def kernel_moments(order: int, upto: int | None = None) -> np.ndarray:
    """``[int v**j K(v) dv for j in 0..upto]`` by adaptive quadrature."""
    K = KERNELS[order]
    upto = order if upto is None else upto
    return np.array([
        integrate.quad(lambda v, j=j: v**j * K(v), -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)[0]
        for j in range(upto + 1)
    ])


def check_kernel(order: int, tol: float = 1e-8) -> None:
    m = kernel_moments(order, order - 1)
    target = np.zeros(order)
    target[0] = 1.0
    if np.max(np.abs(m - target)) > tol:
        raise ValueError(f"kernel of order {order} fails its moment conditions: {m}")


@njit(cache=True)
def _cv_sum(u, upos, cnt, inv_h, empty_tol, min_den):
    # u is in ascending-y order; upos/cnt are the distinct last-tie positions
    n = u.shape[0]
    row = np.empty(n)
    total = 0.0
    for i in range(n):
        ui = u[i]
        for j in range(n):
            d = (ui - u[j]) * inv_h
            d2 = d * d
            row[j] = (1.5 - 0.5 * d2) * math.exp(-0.5 * d2)
        row[i] = 0.0
        c = 0.0
        mx = 0.0
        for j in range(n):
            mx = max(mx, abs(row[j]))
            c += row[j]
            row[j] = c
        if mx <= empty_tol:
            return np.nan
        # the fourth-order kernel can cancel; keep the sign, bound the relative magnitude
        s = c
        floor = min_den * mx
        if abs(s) < floor:
            s = -floor if s < 0 else floor
        acc = 0.0
        for q in range(upos.shape[0]):
            F = min(max(row[upos[q]] / s, 0.0), 1.0)
            r = (1.0 if upos[q] >= i else 0.0) - F
            acc += cnt[q] * r * r
        total += acc
    return total / (n * n)


class _CVWork:
    """Leave-one-out criterion for fixed ``(X, y)``.

    Rows are kept in ascending-``y`` order so each leave-one-out CDF,
    evaluated at every observed ``y``, is a running sum of kernel weights.
    The constant factor ``1/sqrt(2 pi)`` cancels in the ratio and is dropped.
    """

    def __init__(self, X, y):
        order = np.argsort(y, kind="stable")
        self.X = np.ascontiguousarray(X[order])
        ys = y[order]
        self.n = len(ys)
        pos = np.searchsorted(ys, ys, side="right") - 1
        upos, cnt = np.unique(pos, return_counts=True)
        self.upos = upos.astype(np.int64)
        self.cnt = cnt.astype(float)

    def __call__(self, beta, h) -> float:
        u = np.ascontiguousarray(self.X @ beta)
        value = _cv_sum(u, self.upos, self.cnt, 1.0 / h, _EMPTY_WINDOW, _MIN_DENOMINATOR)
        if math.isnan(value):
            raise UndefinedWindowError(f"empty leave-one-out window at h={h:g}")
        return value


def cv_criterion(X, y, beta, h) -> float:
    """Leave-one-out CDF criterion for index ``beta`` and bandwidth ``h``.

    ``(1/n) sum_i sum_k (1/n) {I(Y_i <= Y_k) - F^(-i)(Y_k | X_i'beta)}^2``
    where ``F^(-i)`` uses the fourth-order kernel, clamped to [0, 1].
    Raises :class:`UndefinedWindowError` when some leave-one-out window is
    empty.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if len(y) < 2:
        raise ValidationError("criterion needs at least two rows")
    if beta[0] != 1.0:
        raise ValidationError("beta[0] must equal 1")
    if not h > 0:
        raise ValidationError("bandwidth must be positive")
    return _CVWork(X, y)(beta, h)


@dataclass(frozen=True)
class SingleIndexSettings:
    restarts: int = 5
    h_lower: float = 0.5
    h_upper: float = 3.0
    h_grid_size: int = 15
    xatol: float = 1e-3
    fatol: float = 1e-8
    max_fev: int = 3000
    coef_bound: float = 100.0
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: dict | None) -> "SingleIndexSettings":
        cfg = dict(cfg or {})
        return cls(**{k.replace("-", "_"): v for k, v in cfg.items()})


@dataclass(frozen=True)
class OutcomeFit:
    """Fitted single-index conditional CDF for one arm.

    ``index`` and ``support`` are the training pairs ``(x'beta, y)`` sorted
    by index value.
    """

    beta: np.ndarray
    h_stage1: float
    h_stage2: float
    index: np.ndarray
    support: np.ndarray
    cv_value: float = float("nan")
    n_evals: int = 0
    arm: int | None = None
    kernel_orders: tuple = (4, 2)

    @property
    def n(self) -> int:
        return len(self.support)

    def weights(self, X) -> np.ndarray:
        """Stage-2 Nadaraya-Watson weights, shape ``(m, n_train)``."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :] if len(self.beta) > 1 or X.size == 1 else X[:, None]
        if X.shape[1] != len(self.beta):
            raise ValueError(f"expected {len(self.beta)} covariates, got {X.shape[1]}")
        uq = X @ self.beta
        out = np.empty((len(uq), self.n))
        step = max(1, _BLOCK_ELEMS // max(self.n, 1))
        inv_h = 1.0 / self.h_stage2
        for i0 in range(0, len(uq), step):
            d = (uq[i0:i0 + step, None] - self.index[None, :]) * inv_h
            K = np.exp(-0.5 * d * d)
            s = K.sum(axis=1)
            empty = s == 0.0
            if np.any(empty):
                log.warning("kernel weights underflowed at %d point(s); using the arm's marginal ECDF",
                            int(empty.sum()))
                K[empty] = 1.0
                s[empty] = self.n
            out[i0:i0 + step] = K / s[:, None]
        return out


def _scaled_starts(X, y, free, r, rng, restarts):
    starts = []
    A = np.column_stack([np.ones(len(y)), X])
    coef = np.linalg.lstsq(A, y, rcond=None)[0][1:]
    big = np.max(np.abs(coef[free] * r[free])) if len(free) else 0.0
    if abs(coef[0]) > 1e-6 * max(big, 1e-300):
        starts.append(coef[free] / coef[0] / r[free])
    while len(starts) < max(restarts, 1):
        starts.append(rng.normal(size=len(free)))
    return starts


def fit_single_index(X, y, settings: SingleIndexSettings | None = None, arm=None) -> OutcomeFit:
    """Minimise the leave-one-out criterion over ``(beta[1:], h)``.

    ``h`` ranges over ``[h_lower * n**(-1/5), h_upper * n**(-1/16)]`` times
    the standard deviation of the index. Free coefficients are searched in
    units scaled by covariate standard deviations and bounded by
    ``coef_bound`` there, which keeps the search on a compact set when one
    covariate dominates. Each start gets a coarse
    bandwidth grid, then a bounded Nelder-Mead on ``(beta[1:], log h)``;
    the best run's bandwidth is finally re-profiled at fixed ``beta``.
    """
    settings = settings or SingleIndexSettings()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < p + 2:
        raise ValidationError(f"single-index fit needs at least p+2={p + 2} rows, got {n}")
    work = _CVWork(X, y)
    rng = np.random.default_rng(settings.seed)
    sd = X.std(axis=0)
    sd1 = sd[0] if sd[0] > 0 else 1.0
    r = np.where(sd > 0, sd1 / np.where(sd > 0, sd, 1.0), 0.0)
    free = np.flatnonzero((np.arange(p) > 0) & (sd > 0))
    lo = math.log(settings.h_lower * n ** (-1.0 / 5.0))
    hi = math.log(settings.h_upper * n ** (-1.0 / 16.0))
    evals = [0]

    def beta_of(b):
        beta = np.zeros(p)
        beta[0] = 1.0
        beta[free] = b * r[free]
        return beta

    def index_scale(beta):
        s = float(np.std(X @ beta))
        return s if s > 0 else 1.0

    def f(beta, theta, scale):
        evals[0] += 1
        try:
            return work(beta, scale * math.exp(theta))
        except UndefinedWindowError:
            return math.inf

    def profile_theta(beta):
        scale = index_scale(beta)
        grid = np.linspace(lo, hi, settings.h_grid_size)
        vals = np.array([f(beta, th, scale) for th in grid])
        k = int(np.argmin(vals))
        a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(lambda th: f(beta, th, scale), bounds=(a, b),
                                       method="bounded", options={"xatol": 1e-4})
        if res.fun <= vals[k]:
            return float(res.x), float(res.fun)
        return float(grid[k]), float(vals[k])

    if len(free) == 0:
        beta = beta_of(np.zeros(0))
        theta, value = profile_theta(beta)
        converged = np.isfinite(value)
    else:
        best = None
        B = settings.coef_bound
        for start in _scaled_starts(X, y, free, r, rng, settings.restarts):
            start = np.clip(start, -B, B)
            theta0, _ = profile_theta(beta_of(start))
            x0 = np.append(start, theta0)
            simplex = np.vstack([x0] + [x0 + step * e for step, e in
                                        zip([0.3] * len(free) + [0.3], np.eye(len(x0)))])
            simplex[:, -1] = np.clip(simplex[:, -1], lo, hi)
            simplex[:, :-1] = np.clip(simplex[:, :-1], -B, B)
            res = optimize.minimize(
                lambda z: f(beta_of(z[:-1]), z[-1], index_scale(beta_of(z[:-1]))),
                x0, method="Nelder-Mead",
                bounds=[(-B, B)] * len(free) + [(lo, hi)],
                options={"initial_simplex": simplex, "xatol": settings.xatol,
                         "fatol": settings.fatol, "maxfev": settings.max_fev},
            )
            if best is None or res.fun < best.fun:
                best = res
        beta = beta_of(best.x[:-1])
        theta, value = profile_theta(beta)
        if value > best.fun:
            theta, value = float(best.x[-1]), float(best.fun)
        converged = bool(best.success) and np.isfinite(value)
    if not converged:
        raise NonConvergenceError("single-index search did not converge", best=(beta, theta, value))
    h1 = index_scale(beta) * math.exp(theta)
    u = X @ beta
    order = np.argsort(u, kind="stable")
    return OutcomeFit(
        beta=beta,
        h_stage1=h1,
        h_stage2=h1 * n ** STAGE2_EXPONENT,
        index=u[order],
        support=y[order],
        cv_value=float(value),
        n_evals=evals[0],
        arm=arm,
    )


@dataclass(frozen=True)
class DiscreteConditionalLaw:
    """Exact conditional law of ``Y`` on finitely many covariate cells.

    ``probs[c, j] = P(Y = support[j] | X = cells[c])``.
    """

    cells: np.ndarray
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=float)
        if cells.ndim == 1:
            cells = cells[:, None]
        probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "support", np.asarray(self.support, dtype=float))
        object.__setattr__(self, "probs", probs)

    def cell_of(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.cells.shape[1] == 1 else X[None, :]
        match = np.all(X[:, None, :] == self.cells[None, :, :], axis=2)
        if not np.all(match.any(axis=1)):
            raise ValueError("covariate value outside the law's cells")
        return match.argmax(axis=1)

    def weights(self, X) -> np.ndarray:
        return self.probs[self.cell_of(X)]


def _g_values(law, g):
    return np.asarray(g(law.support) if callable(g) else g, dtype=float)


def cond_cdf(law, y, X) -> np.ndarray:
    """``P(Y <= y | X)``; exact step function of ``y``."""
    W = law.weights(X)
    return W @ (law.support <= y).astype(float)


def moment(law, g, X) -> np.ndarray:
    """``E[g(Y) | X]`` as the Stieltjes sum against the step-function CDF."""
    return law.weights(X) @ _g_values(law, g)


def c_factor(law, spec: TiltSpec, X) -> np.ndarray:
    return moment(law, exp_tilt(spec, law.support), X)


def tilted_mean(law, spec: TiltSpec, X) -> np.ndarray:
    """Mean of the exponentially tilted conditional law."""
    W = law.weights(X)
    e = exp_tilt(spec, law.support)
    return (W @ (law.support * e)) / (W @ e)
