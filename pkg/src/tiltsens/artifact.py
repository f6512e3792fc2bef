"""Model artifact: JSON with base64-encoded float64 arrays.

The document is written with sorted keys and a fixed layout, so refitting
with the same inputs produces a byte-identical file.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .estimator import NuisanceBundle
from .exceptions import ConfigError
from .outcome_cdf import OutcomeFit
from .propensity import PropensityFit, _SplineTerm

FORMAT_VERSION = 1


def _enc(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "f8": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["f8"]), dtype="<f8").reshape(d["shape"]).copy()


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _unnum(v):
    return float(v)


def propensity_to_dict(fit: PropensityFit) -> dict:
    return {
        "intercept": _num(fit.intercept),
        "linear_columns": list(fit.linear_columns),
        "linear_coef": _enc(fit.linear_coef),
        "splines": [
            {"column": s.column, "knots": _enc(s.knots), "lo": _num(s.lo), "hi": _num(s.hi),
             "Z": _enc(s.Z), "S": _enc(s.S), "coef": _enc(c)}
            for s, c in zip(fit.spline_terms, fit.spline_coef)
        ],
        "lambdas": [_num(v) for v in fit.lambdas],
        "clip_epsilon": _num(fit.clip_epsilon),
        "p": fit.p,
        "n_iter": fit.n_iter,
        "cv_deviance": _num(fit.cv_deviance),
    }


def propensity_from_dict(d: dict) -> PropensityFit:
    terms = tuple(_SplineTerm(s["column"], _dec(s["knots"]), _unnum(s["lo"]), _unnum(s["hi"]),
                              _dec(s["Z"]), _dec(s["S"])) for s in d["splines"])
    return PropensityFit(
        intercept=_unnum(d["intercept"]),
        linear_columns=tuple(d["linear_columns"]),
        linear_coef=_dec(d["linear_coef"]),
        spline_terms=terms,
        spline_coef=tuple(_dec(s["coef"]) for s in d["splines"]),
        lambdas=tuple(_unnum(v) for v in d["lambdas"]),
        clip_epsilon=_unnum(d["clip_epsilon"]),
        p=d["p"],
        n_iter=d["n_iter"],
        cv_deviance=_unnum(d["cv_deviance"]),
    )


def outcome_to_dict(fit: OutcomeFit) -> dict:
    return {
        "beta": _enc(fit.beta), "h_stage1": _num(fit.h_stage1), "h_stage2": _num(fit.h_stage2),
        "index": _enc(fit.index), "support": _enc(fit.support), "cv_value": _num(fit.cv_value),
        "n_evals": fit.n_evals, "arm": fit.arm, "kernel_orders": list(fit.kernel_orders),
    }


def outcome_from_dict(d: dict) -> OutcomeFit:
    return OutcomeFit(_dec(d["beta"]), _unnum(d["h_stage1"]), _unnum(d["h_stage2"]), _dec(d["index"]),
                      _dec(d["support"]), _unnum(d["cv_value"]), d["n_evals"], d["arm"],
                      tuple(d["kernel_orders"]))


def bundle_to_dict(nb: NuisanceBundle, meta: dict | None = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "nuisance_bundle",
        "meta": meta or {},
        "propensity": propensity_to_dict(nb.propensity),
        "outcome": {str(t): outcome_to_dict(nb.outcome[t]) for t in (0, 1)},
    }


def bundle_from_dict(d: dict) -> NuisanceBundle:
    if d.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported artifact format version {d.get('format_version')!r}")
    return NuisanceBundle(propensity_from_dict(d["propensity"]),
                          {t: outcome_from_dict(d["outcome"][str(t)]) for t in (0, 1)})


def save_bundle(nb: NuisanceBundle, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(bundle_to_dict(nb, meta), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_bundle(path) -> NuisanceBundle:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model artifact not found: {path}")
    return bundle_from_dict(json.loads(path.read_text(encoding="utf-8")))
