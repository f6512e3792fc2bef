"""Report figures (matplotlib, non-interactive backend).

Every function takes tabular results and a path, writes one figure and
returns the path. SVG output is made reproducible by fixing the hash salt
and dropping the creation date.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "tiltsens",
    "svg.fonttype": "path",
}
REGION_COLORS = {"worse": "#d9a3a3", "indeterminate": "#f2f2f2", "better": "#a3c4d9"}


def _save(fig, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix.lower() in (".svg", ".pdf") else {}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def ace_contour(table, path, method: str = "normal", labels=("worse", "better")) -> Path:
    """ACE contours over ``(gamma1, gamma0)`` with CI-sign regions shaded.

    ``table`` is a grid report DataFrame (one row per cell and CI method).
    """
    df = table[table["ci_method"] == method]
    g1 = np.unique(df["gamma1"].to_numpy())
    g0 = np.unique(df["gamma0"].to_numpy())
    Z = np.full((len(g0), len(g1)), np.nan)
    cls = np.full((len(g0), len(g1)), np.nan)
    code = {"worse": 0, "indeterminate": 1, "better": 2}
    for row in df.itertuples(index=False):
        i, j = np.searchsorted(g0, row.gamma0), np.searchsorted(g1, row.gamma1)
        Z[i, j] = row.ace
        cls[i, j] = code.get(row.classification, np.nan)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.8))
        cmap = ListedColormap([REGION_COLORS[k] for k in code])
        ax.pcolormesh(g1, g0, np.ma.masked_invalid(cls), cmap=cmap, vmin=-0.5, vmax=2.5, shading="nearest")
        if len(g1) > 1 and len(g0) > 1 and np.isfinite(Z).sum() >= 4:
            cs = ax.contour(g1, g0, Z, colors="k", linewidths=0.7)
            ax.clabel(cs, fmt="%.0f", fontsize=7)
        handles = [plt.Rectangle((0, 0), 1, 1, color=REGION_COLORS[k]) for k in ("worse", "better")]
        ax.legend(handles, [f"treatment {labels[0]}", f"treatment {labels[1]}"], loc="upper right",
                  frameon=False)
        ax.set_xlabel(r"$\gamma_1$")
        ax.set_ylabel(r"$\gamma_0$")
        ax.set_title("Estimated ACE")
        return _save(fig, path)


def psi_curves(table, path, ylabel: str = "estimate") -> Path:
    """Point estimate with interval band against ``gamma`` for one arm."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        g = table["gamma"].to_numpy()
        ax.fill_between(g, table["ci_lo"], table["ci_hi"], color="0.85", lw=0)
        ax.plot(g, table["psi"], color="k", lw=1.2, label="mean of Y(t)")
        if "induced_mean" in table:
            ax.plot(g, table["induced_mean"], color="C3", lw=1.0, ls="--", label="induced mean")
        ax.set_xlabel(r"$\gamma$")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        return _save(fig, path)


def tilt_functions(funcs, y_range, path, names=None) -> Path:
    """Plot tilting functions over ``y_range``."""
    y = np.linspace(*y_range, 400)
    names = names or [type(f).__name__ for f in funcs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for f, name in zip(funcs, names):
            ax.plot(y, f(y), lw=1.2, label=name)
        ax.set_xlabel("y")
        ax.set_ylabel("s(y)")
        ax.legend(frameon=False)
        return _save(fig, path)


def coverage_plot(table, path) -> Path:
    """Coverage per CI method against ``gamma`` from a simulation table."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for col, name in (("cov_normal", "normal"), ("cov_percentile", "percentile"),
                          ("cov_double", "double")):
            for n, sub in table.groupby("n"):
                if sub[col].notna().any():
                    ax.plot(sub["gamma"], sub[col], marker="o", ms=3, lw=1.0, label=f"{name}, n={n}")
        ax.axhline(0.95, color="0.5", lw=0.7, ls=":")
        ax.set_xlabel(r"$\gamma$")
        ax.set_ylabel("coverage")
        ax.legend(frameon=False)
        return _save(fig, path)
