"""JSON run configuration shared by the CLI commands."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bootstrap import METHODS, CiSpec
from .dataset import load_csv
from .estimator import EstimatorOptions
from .exceptions import ConfigError
from .outcome_cdf import SingleIndexSettings
from .propensity import PropensitySettings
from .tilting import Identity, tilt_function_from_config


def parse_grid(spec, name: str) -> tuple:
    """A list of values, or ``{"start", "stop", "step"}`` (inclusive stop)."""
    if spec is None:
        return (0.0,)
    if isinstance(spec, (int, float)):
        return (float(spec),)
    if isinstance(spec, dict):
        try:
            start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        except KeyError as err:
            raise ConfigError(f"{name}: range grid is missing {err}") from None
        if step <= 0 or stop < start:
            raise ConfigError(f"{name}: need step > 0 and stop >= start")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(v) for v in np.round(start + step * np.arange(count), 12))
    values = tuple(float(v) for v in spec)
    if not values:
        raise ConfigError(f"{name}: grid is empty")
    return values


@dataclass
class RunConfig:
    raw: dict
    base: Path
    seed: int
    folds: int = 5
    options: EstimatorOptions = field(default_factory=EstimatorOptions)
    s1: object = field(default_factory=Identity)
    s0: object = field(default_factory=Identity)
    ci: CiSpec = field(default_factory=CiSpec)
    ci_methods: tuple = ("normal",)
    output: Path | None = None

    @classmethod
    def from_dict(cls, raw: dict, base=".") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        if "seed" not in raw:
            raise ConfigError("'seed' is required")
        try:
            seed = int(raw["seed"])
            prop = PropensitySettings.from_config(raw.get("propensity"))
            si = SingleIndexSettings.from_config(dict({"seed": seed}, **(raw.get("single_index") or {})))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad estimator settings: {err}") from None
        ci_raw = dict(raw.get("ci") or {})
        methods = tuple(ci_raw.pop("methods", ["normal"]))
        bad = set(methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown CI methods {sorted(bad)}")
        ci_raw.setdefault("seed", seed)
        ci_raw.setdefault("method", next((m for m in methods if m != "normal"), "normal"))
        try:
            ci = CiSpec.from_config(ci_raw)
        except TypeError as err:
            raise ConfigError(f"bad ci settings: {err}") from None
        tilt = raw.get("tilt") or {}
        opts = EstimatorOptions(prop, si, bool(raw.get("huberize", True)), ci.level,
                                workers=int(raw.get("threads", 1)))
        out = raw.get("output")
        base = Path(base)
        return cls(
            raw=raw, base=base, seed=seed, folds=int(raw.get("folds", 5)), options=opts,
            s1=tilt_function_from_config(tilt["s1"]) if "s1" in tilt else Identity(),
            s0=tilt_function_from_config(tilt["s0"]) if "s0" in tilt else Identity(),
            ci=ci, ci_methods=methods, output=(base / out) if out else None,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from None
        return cls.from_dict(raw, path.parent)

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name) or {})

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def dataset(self):
        data = self.section("data")
        if "path" not in data or "schema" not in data:
            raise ConfigError("'data' needs 'path' and 'schema'")
        schema = data["schema"]
        if isinstance(schema, str):
            schema = self.path(schema)
        return load_csv(self.path(data["path"]), schema)

    def grid(self, key: str) -> tuple:
        return parse_grid(self.section("grid").get(key), f"grid.{key}")

    def with_threads(self, threads: int) -> "RunConfig":
        o = self.options
        self.options = EstimatorOptions(o.propensity, o.single_index, o.huberize, o.level,
                                        o.clip_warn_rate, threads)
        return self
