"""Tilting functions and the exponential-tilt sensitivity model.

The counterfactual law of ``Y(t)`` among units with ``T = 1 - t`` is the
observed arm-``t`` law reweighted by ``exp(gamma * s(y))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import erfc

from .exceptions import ConfigError, TiltOverflowError, ValidationError

OVERFLOW_THRESHOLD = 700.0
_SQRT2 = math.sqrt(2.0)


def norm_cdf(z):
    """Standard normal CDF through ``erfc``; accurate to ~1e-15 relative."""
    return 0.5 * erfc(-np.asarray(z, dtype=float) / _SQRT2)


@dataclass(frozen=True)
class Identity:
    kind = "identity"

    def __call__(self, y):
        return np.asarray(y, dtype=float)

    def to_config(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class SmoothCapAbove:
    """``y * Phi((cap - y)/scale) + (cap - y) * (1 - Phi((cap - y)/scale))``.

    Behaves like ``y`` well below ``cap`` and like ``cap - y`` well above it.
    """

    cap: float
    scale: float
    kind = "smooth_cap_above"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("SmoothCapAbove requires scale > 0")

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        w = norm_cdf((self.cap - y) / self.scale)
        return y * w + (self.cap - y) * (1.0 - w)

    def to_config(self):
        return {"kind": self.kind, "cap": self.cap, "scale": self.scale}


@dataclass(frozen=True)
class SmoothRampAbove:
    """``y * Phi((y - floor)/scale)``."""

    floor: float
    scale: float
    kind = "smooth_ramp_above"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("SmoothRampAbove requires scale > 0")

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return y * norm_cdf((y - self.floor) / self.scale)

    def to_config(self):
        return {"kind": self.kind, "floor": self.floor, "scale": self.scale}


@dataclass(frozen=True)
class UserTable:
    """Piecewise-linear interpolation of ``(y, s)`` knots, flat outside them."""

    y: tuple
    s: tuple
    kind = "user_table"

    def __post_init__(self):
        y = tuple(float(v) for v in self.y)
        s = tuple(float(v) for v in self.s)
        if len(y) != len(s) or len(y) < 1:
            raise ValidationError("UserTable needs equally many y and s knots")
        if np.any(np.diff(y) <= 0):
            raise ValidationError("UserTable knots must be strictly increasing in y")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s", s)

    def __call__(self, y):
        return np.interp(np.asarray(y, dtype=float), self.y, self.s)

    def to_config(self):
        return {"kind": self.kind, "y": list(self.y), "s": list(self.s)}


TiltFunction = Union[Identity, SmoothCapAbove, SmoothRampAbove, UserTable]


def tilt_function_from_config(cfg: dict) -> TiltFunction:
    kind = cfg.get("kind")
    try:
        if kind == "identity":
            return Identity()
        if kind == "smooth_cap_above":
            return SmoothCapAbove(float(cfg["cap"]), float(cfg["scale"]))
        if kind == "smooth_ramp_above":
            return SmoothRampAbove(float(cfg["floor"]), float(cfg["scale"]))
        if kind == "user_table":
            return UserTable(tuple(cfg["y"]), tuple(cfg["s"]))
    except KeyError as err:
        raise ConfigError(f"tilt function {kind!r} is missing key {err}") from None
    raise ConfigError(f"unknown tilt function kind {kind!r}")


@dataclass(frozen=True)
class TiltSpec:
    """Sensitivity parameter ``gamma`` and tilting function ``s`` for one arm."""

    gamma: float
    s: TiltFunction = Identity()
    arm: int = 1

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ValidationError("gamma must be finite")
        if self.arm not in (0, 1):
            raise ValidationError("arm must be 0 or 1")

    def with_gamma(self, gamma: float) -> "TiltSpec":
        return TiltSpec(float(gamma), self.s, self.arm)

    def to_config(self):
        return {"arm": self.arm, "gamma": self.gamma, "s": self.s.to_config()}

    @classmethod
    def from_config(cls, cfg: dict) -> "TiltSpec":
        try:
            return cls(float(cfg["gamma"]), tilt_function_from_config(cfg["s"]), int(cfg["arm"]))
        except KeyError as err:
            raise ConfigError(f"tilt spec is missing key {err}") from None


def eval_tilt(spec: TiltSpec, y):
    return spec.s(y)


def exp_tilt(spec: TiltSpec, y):
    """``exp(gamma * s(y))``; raises instead of overflowing."""
    if spec.gamma == 0.0:
        return np.ones_like(np.asarray(y, dtype=float))
    z = spec.gamma * spec.s(y)
    if np.any(z > OVERFLOW_THRESHOLD):
        bad = np.atleast_1d(np.asarray(y, dtype=float))[np.atleast_1d(z) > OVERFLOW_THRESHOLD][0]
        raise TiltOverflowError(
            f"gamma*s(y) exceeds {OVERFLOW_THRESHOLD:g} at y={bad:g} (gamma={spec.gamma:g})", y=bad
        )
    return np.exp(z)


def implied_selection_logit(spec: TiltSpec, pi_other, c, x=None):
    """Intercept ``h(x; gamma)`` of the selection model implied by the tilt.

    ``logit P(T = 1-t | X, Y(t)) = h(X; gamma) + gamma * s(Y(t))`` with
    ``h = logit(pi_other) - log(c)``; ``pi_other = P(T = 1-t | X)`` and
    ``c = E[exp(gamma s(Y)) | T=t, X]``.
    """
    pi_other = np.asarray(pi_other, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any((pi_other <= 0) | (pi_other >= 1)):
        raise ValidationError("pi_other must lie strictly inside (0, 1)")
    if np.any(c <= 0):
        raise ValidationError("c must be positive")
    out = np.log(pi_other) - np.log1p(-pi_other) - np.log(c)
    return float(out) if out.ndim == 0 else out
