"""Command-line entry point: ``tiltsens <command> --config run.json``.

Commands: ``fit``, ``estimate``, ``induced``, ``gof``, ``simulate``.
Exit codes: 0 success, 2 configuration or data error, 3 numerical
failure, 4 grid finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import plotting
from .artifact import load_bundle, save_bundle
from .bootstrap import CiSpec, double_bootstrap_ci, percentile_bootstrap
from .config import RunConfig, parse_grid
from .dataset import empirical_summary, make_folds
from .diagnostics import fit_parametric_baseline, generate_parametric, gof_report
from .estimator import (
    EstimatorOptions,
    fit_folds,
    fit_nuisances,
    induced_mean,
    report_from_folds,
    sensitivity_grid,
)
from .exceptions import ConfigError, NonConvergenceError, NumericalError, TiltsensError, ValidationError
from .sim import SimulationConfig, run_simulation, synthetic_truth
from .tilting import TiltSpec

log = logging.getLogger("tiltsens")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 2, 3, 4
FLOAT_FORMAT = "%.10g"


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    log.info("wrote %s", path)
    return path


def _write_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    log.info("wrote %s", path)
    return path


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


def _bundle_for(cfg: RunConfig, ds):
    model = cfg.raw.get("model")
    if model:
        return load_bundle(cfg.path(model))
    return fit_nuisances(ds, cfg.options.propensity, cfg.options.single_index)


# ---------------------------------------------------------------------------


def cmd_fit(cfg: RunConfig, out: Path) -> int:
    ds = cfg.dataset()
    try:
        nb = fit_nuisances(ds, cfg.options.propensity, cfg.options.single_index)
    except NonConvergenceError as err:
        _write_json({"error": str(err), "best": err.best, "trace": err.trace}, out / "diagnostic.json")
        raise
    save_bundle(nb, out / "model.json", meta={"covariates": list(ds.covariate_names), "n": ds.n})
    telemetry = {
        "n": ds.n,
        "covariates": list(ds.covariate_names),
        "propensity": {"lambdas": list(nb.propensity.lambdas), "clip_rate": nb.propensity.clip_rate(ds.X),
                       "cv_deviance": nb.propensity.cv_deviance, "iterations": nb.propensity.n_iter},
        "outcome": {str(t): {"beta": nb.outcome[t].beta.tolist(), "h_stage1": nb.outcome[t].h_stage1,
                             "h_stage2": nb.outcome[t].h_stage2, "cv_value": nb.outcome[t].cv_value,
                             "n_train": nb.outcome[t].n}
                    for t in (1, 0)},
    }
    _write_json(telemetry, out / "fit_telemetry.json")
    summary = empirical_summary(ds).reset_index(names="statistic")
    _write_csv(summary, out / "summary.csv")
    for t in (1, 0):
        o = nb.outcome[t]
        print(f"arm {t}: beta={np.array2string(o.beta, precision=4)} h1={o.h_stage1:.4g} h2={o.h_stage2:.4g}")
    print(f"propensity clip rate: {telemetry['propensity']['clip_rate']:.3f}")
    return EXIT_OK


def _grid_boot(cfg, ds, cells):
    """Bootstrap callable for :func:`sensitivity_grid` (vectorised over cells)."""

    def fn(d, seed):
        plan = make_folds(d, cfg.folds, seed)
        folds = fit_folds(d, plan, cfg.options)
        est, se = [], []
        for g1, g0 in cells:
            rep = report_from_folds(folds, d.n, TiltSpec(g1, cfg.s1, 1), TiltSpec(g0, cfg.s0, 0), cfg.options)
            est.append(rep.ace)
            se.append(rep.se["ace"])
        return np.array(est), np.array(se)

    return fn


def cmd_estimate(cfg: RunConfig, out: Path) -> int:
    ds = cfg.dataset()
    plan = make_folds(ds, cfg.folds, cfg.seed)
    folds = fit_folds(ds, plan, cfg.options)

    def boot(cells, method):
        fn = _grid_boot(cfg, ds, cells)
        spec = CiSpec(method, cfg.ci.level, cfg.ci.B1, cfg.ci.B2, cfg.ci.seed)
        res = percentile_bootstrap(ds, fn, spec) if method == "percentile" else double_bootstrap_ci(ds, fn, spec)
        return dict(zip(cells, [tuple(r) for r in res]))

    grid = sensitivity_grid(ds, plan, cfg.grid("gamma1"), cfg.grid("gamma0"), cfg.s1, cfg.s0, cfg.options,
                            folds=folds, ci_methods=cfg.ci_methods, boot=boot,
                            lower_is_worse=bool(cfg.section("grid").get("lower_is_worse", True)))
    _write_csv(grid.table, out / "grid.csv")
    folds_rows = []
    for (g1, g0), rep in grid.reports.items():
        df = rep.per_fold.copy()
        df.insert(0, "gamma0", g0)
        df.insert(0, "gamma1", g1)
        folds_rows.append(df)
    if folds_rows:
        _write_csv(pd.concat(folds_rows, ignore_index=True), out / "folds.csv")
    naive = float(ds.y[ds.t == 1].mean() - ds.y[ds.t == 0].mean())
    print(f"naive difference in arm means: {naive:.6g}")
    if cfg.section("figures").get("enabled", True):
        if len(cfg.grid("gamma1")) > 1 and len(cfg.grid("gamma0")) > 1:
            plotting.ace_contour(grid.table, out / "ace_contour.svg", method=cfg.ci_methods[0])
        lo, hi = float(np.min(ds.y)), float(np.max(ds.y))
        plotting.tilt_functions([cfg.s1, cfg.s0], (lo, hi), out / "tilt_functions.svg", names=["s1", "s0"])
    for row in grid.table.head(3).itertuples(index=False):
        print(f"gamma=({row.gamma1:g}, {row.gamma0:g}) ace={row.ace:.6g} "
              f"{row.ci_method} CI=({row.ci_lo:.6g}, {row.ci_hi:.6g}) {row.classification}")
    if grid.failures:
        log.error("%d grid cell(s) failed", len(grid.failures))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_induced(cfg: RunConfig, out: Path) -> int:
    ds = cfg.dataset()
    sec = cfg.section("induced")
    t = int(sec.get("arm", 1))
    if t not in (0, 1):
        raise ConfigError("induced.arm must be 0 or 1")
    gammas = parse_grid(sec.get("gammas"), "induced.gammas")
    plan = make_folds(ds, cfg.folds, cfg.seed)
    folds = fit_folds(ds, plan, cfg.options)
    s_t = cfg.s1 if t == 1 else cfg.s0
    s_o = cfg.s0 if t == 1 else cfg.s1
    rows = []
    for g in gammas:
        specs = {t: TiltSpec(g, s_t, t), 1 - t: TiltSpec(0.0, s_o, 1 - t)}
        rep = report_from_folds(folds, ds.n, specs[1], specs[0], cfg.options)
        psi = rep.psi_tilde[t]
        lo, hi = rep.ci[f"psi{t}"]["normal"]
        rows.append({"arm": t, "gamma": g, "psi": psi, "se": rep.se[f"psi{t}"], "ci_lo": lo, "ci_hi": hi,
                     "induced_mean": induced_mean(psi, ds, t),
                     "observed_other_arm_mean": float(ds.y[ds.t == 1 - t].mean())})
    table = pd.DataFrame(rows)
    _write_csv(table, out / "induced.csv")
    if cfg.section("figures").get("enabled", True) and len(table) > 1:
        plotting.psi_curves(table, out / "induced.svg", ylabel=f"mean of Y({t})")
    return EXIT_OK


def cmd_gof(cfg: RunConfig, out: Path) -> int:
    ds = cfg.dataset()
    sec = cfg.section("gof")
    subgroups = sec.get("subgroups")
    if not subgroups:
        raise ConfigError("gof.subgroups is required")
    n_synth = int(sec.get("n_synth", 100_000))
    nb = _bundle_for(cfg, ds)
    table = gof_report(ds, nb, subgroups, n_synth, cfg.seed)
    if sec.get("parametric", False):
        base = fit_parametric_baseline(ds)
        par = gof_report(ds, nb, subgroups, n_synth, cfg.seed,
                         generator=lambda n, s: generate_parametric(base, ds, n, s))
        for col in ("treated_fraction_abs_diff", "ks_treated", "ks_control"):
            table[f"parametric_{col}"] = par[col]
    _write_csv(table, out / "gof.csv")
    print("note: treated_fraction_abs_diff compares subgroup treated fractions as scalars, "
          "not conditional treatment probabilities")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    sec = cfg.section("simulate")
    truth_cfg = sec.get("truth") or {"synthetic": {}}
    if "model" in truth_cfg:
        truth = load_bundle(cfg.path(truth_cfg["model"]))
        xs = cfg.dataset()
    else:
        syn = truth_cfg.get("synthetic") or {}
        truth, xs = synthetic_truth(int(syn.get("n", 2500)), int(syn.get("seed", cfg.seed)), cfg.options)
    si = cfg.options.single_index
    if "restarts" in sec:
        from dataclasses import replace

        si = replace(si, restarts=int(sec["restarts"]))
    opts = EstimatorOptions(cfg.options.propensity, si, cfg.options.huberize, cfg.options.level)
    sim_cfg = SimulationConfig(
        truth=truth, xs=xs,
        gamma1_grid=parse_grid(sec.get("gamma1", [0.0]), "simulate.gamma1"),
        gamma0_grid=parse_grid(sec.get("gamma0", [0.0]), "simulate.gamma0"),
        s1=cfg.s1, s0=cfg.s0,
        sizes=tuple(int(n) for n in sec.get("sizes", [1000])),
        R=int(sec.get("R", 200)),
        methods=tuple(sec.get("methods", cfg.ci_methods)),
        ci=CiSpec("percentile", cfg.ci.level, cfg.ci.B1, cfg.ci.B2, cfg.ci.seed),
        K=cfg.folds, seed=cfg.seed, options=opts, workers=cfg.options.workers,
    )
    res = run_simulation(sim_cfg)
    for t, df in res.tables.items():
        _write_csv(df, out / f"simulation_arm{t}.csv")
        if cfg.section("figures").get("enabled", True) and len(df) > 1:
            plotting.coverage_plot(df, out / f"coverage_arm{t}.svg")
    return EXIT_PARTIAL if res.invalid else EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "estimate": cmd_estimate,
    "induced": cmd_induced,
    "gof": cmd_gof,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiltsens", description="Exponential-tilt sensitivity analysis.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides the config's 'output')")
    p.add_argument("--threads", type=int, default=None, help="worker processes for fold fits")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.threads is not None:
            cfg.with_threads(max(1, args.threads))
        out = Path(args.out) if args.out else (cfg.output or Path("."))
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TiltsensError as err:
        cause = getattr(err, "cause", None)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(cause, NumericalError) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
