"""Independent reference computations used by the tests.

These are written with plain loops over enumerable laws and do not call
the estimator module, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import math

import numpy as np

from tiltsens.estimator import NuisanceBundle
from tiltsens.outcome_cdf import DiscreteConditionalLaw
from tiltsens.propensity import FunctionPropensity


class DiscreteWorld:
    """Finite law of ``(X, T, Y)``.

    ``px[c]`` is P(X = cells[c]), ``pi1[c]`` is P(T=1 | X=cells[c]) and
    ``py[t][c, j]`` is P(Y = support[j] | T=t, X=cells[c]).
    """

    def __init__(self, cells, px, pi1, support, py):
        self.cells = np.asarray(cells, dtype=float).reshape(len(px), -1)
        self.px = np.asarray(px, dtype=float)
        self.pi1 = np.asarray(pi1, dtype=float)
        self.support = np.asarray(support, dtype=float)
        self.py = {t: np.atleast_2d(np.asarray(py[t], dtype=float)) for t in (0, 1)}

    def bundle(self) -> NuisanceBundle:
        cells = self.cells
        pi1 = self.pi1

        def fn(X):
            X = np.asarray(X, dtype=float).reshape(-1, cells.shape[1])
            idx = np.all(X[:, None, :] == cells[None, :, :], axis=2).argmax(axis=1)
            return pi1[idx]

        laws = {t: DiscreteConditionalLaw(cells, self.support, self.py[t]) for t in (0, 1)}
        return NuisanceBundle(FunctionPropensity(fn), laws)

    def outcomes(self):
        """Every ``(x, t, y, probability)`` with positive mass."""
        for c in range(len(self.px)):
            for t in (0, 1):
                pt = self.pi1[c] if t == 1 else 1 - self.pi1[c]
                for j, y in enumerate(self.support):
                    p = self.px[c] * pt * self.py[t][c, j]
                    if p > 0:
                        yield self.cells[c], t, float(y), p


def enumerate_psi(world: DiscreteWorld, s, gamma: float, t: int) -> float:
    """Brute-force identifying formula by scalar loops."""
    total = 0.0
    for c in range(len(world.px)):
        pt = world.pi1[c] if t == 1 else 1.0 - world.pi1[c]
        mean_y = 0.0
        num = den = 0.0
        for j, y in enumerate(world.support):
            p = world.py[t][c, j]
            w = math.exp(gamma * float(s(y)))
            mean_y += p * y
            num += p * y * w
            den += p * w
        total += world.px[c] * (mean_y * pt + (num / den) * (1.0 - pt))
    return total


def two_point_world():
    """No covariates, pi1 = 1/2, Y | T uniform on {0, 1}."""
    return DiscreteWorld([[0.0]], [1.0], [0.5], [0.0, 1.0], {0: [[0.5, 0.5]], 1: [[0.5, 0.5]]})


def random_world(rng, n_cells=3, n_y=4):
    cells = np.arange(n_cells, dtype=float)[:, None]
    px = rng.dirichlet(np.ones(n_cells))
    pi1 = rng.uniform(0.2, 0.8, size=n_cells)
    support = np.sort(rng.choice(np.arange(-5, 6), size=n_y, replace=False).astype(float))
    py = {t: rng.dirichlet(np.ones(n_y), size=n_cells) for t in (0, 1)}
    return DiscreteWorld(cells, px, pi1, support, py)


def aipw_crossfit(folds, n, t):
    """Textbook cross-fit AIPW mean of ``Y(t)`` using the fold nuisance values.

    ``folds`` holds (rows, X, T, Y, pi_t, mu_t) per fold; the fold means
    are averaged with equal weight.
    """
    ests = []
    for rows, T, Y, pi_t, mu in folds:
        a = (T == t).astype(float)
        ests.append(np.mean(a * (Y - mu) / pi_t + mu))
    return float(np.mean(ests))


def huber_grid_oracle(values, points=1_000_000, stages=2):
    """Locate the Huber root by repeated grid refinement.

    The left side of the defining equation is nonincreasing in tau, so
    each stage keeps the bracket around its first nonpositive grid value.
    """
    v2 = np.asarray(values, dtype=float) ** 2
    target = math.log(len(v2))
    vmax = math.sqrt(v2.max())

    def f(taus):
        out = np.empty(len(taus))
        srt = np.sort(v2)
        csum = np.concatenate([[0.0], np.cumsum(srt)])
        k = np.searchsorted(srt, taus * taus, side="right")
        out[:] = (csum[k] + (len(srt) - k) * taus * taus) / (taus * taus)
        return out - target

    # min(v^2, tau^2) <= v^2 puts the root at or below sqrt(sum v^2 / log n)
    lo, hi = vmax * 1e-12, max(vmax, math.sqrt(v2.sum() / target)) * (1 + 1e-6)
    for _ in range(stages):
        grid = np.linspace(lo, hi, points)
        vals = f(grid)
        j = int(np.argmax(vals <= 0))
        lo, hi = grid[max(j - 1, 0)], grid[j]
    return 0.5 * (lo + hi)


class GridNormalLaw:
    """``Y | X = x`` normal with mean ``a + b x`` and sd ``sigma``, binned on a fine grid.

    The law is exactly discrete (mass of each bin placed at its midpoint),
    so expectations under it are computed without quadrature error.
    """

    def __init__(self, a, b, sigma, lo=-12.0, hi=12.0, m=801):
        from scipy.stats import norm

        self.a, self.b, self.sigma = a, b, sigma
        edges = np.linspace(lo, hi, m + 1)
        self.support = 0.5 * (edges[1:] + edges[:-1])
        self._edges = edges
        self._cdf = norm.cdf

    def weights(self, X):
        x = np.asarray(X, dtype=float).reshape(len(X), -1)[:, 0]
        z = (self._edges[None, :] - (self.a + self.b * x)[:, None]) / self.sigma
        P = np.diff(self._cdf(z), axis=1)
        return P / P.sum(axis=1, keepdims=True)
