import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltsens.exceptions import ConfigError, TiltOverflowError, ValidationError
from tiltsens.tilting import (
    Identity,
    SmoothCapAbove,
    SmoothRampAbove,
    TiltSpec,
    UserTable,
    eval_tilt,
    exp_tilt,
    implied_selection_logit,
    norm_cdf,
    tilt_function_from_config,
)


def test_cap_at_cap_is_half_cap():
    assert eval_tilt(TiltSpec(0.0, SmoothCapAbove(4000, 200)), 4000.0) == 2000.0


def test_ramp_at_floor_is_half_floor():
    assert eval_tilt(TiltSpec(0.0, SmoothRampAbove(2000, 2000)), 2000.0) == 1000.0


def test_cap_far_below_is_identity():
    v = eval_tilt(TiltSpec(0.0, SmoothCapAbove(4000, 200)), 3000.0)
    assert abs(v - 3000.0) < 1e-6 * 3000 + 1e-3  # Phi(5) misses 1 by 2.9e-7
    assert abs(v - 3000.0) < 1e-3


def test_norm_cdf_accuracy():
    from scipy.special import ndtr

    z = np.linspace(-30, 30, 2001)
    assert np.max(np.abs(norm_cdf(z) - ndtr(z))) < 1e-12


def test_exp_tilt_examples():
    assert exp_tilt(TiltSpec(0.0, Identity()), 123.4) == 1.0
    assert exp_tilt(TiltSpec(math.log(2), Identity()), 1.0) == pytest.approx(2.0, rel=1e-15)
    v = exp_tilt(TiltSpec(0.003, SmoothCapAbove(4000, 200)), 4000.0)
    assert v == pytest.approx(math.exp(6.0), rel=1e-14)
    assert v == pytest.approx(403.4288, abs=1e-4)


def test_exp_tilt_overflow_names_y():
    with pytest.raises(TiltOverflowError) as info:
        exp_tilt(TiltSpec(1.0, Identity()), np.array([1.0, 800.0, 900.0]))
    assert info.value.y == 800.0
    assert "800" in str(info.value)


def test_implied_selection_logit():
    assert implied_selection_logit(TiltSpec(0.0), 0.5, 1.0) == 0.0
    assert implied_selection_logit(TiltSpec(0.1), 0.5, 1.5) == pytest.approx(-0.405465, abs=1e-6)
    assert implied_selection_logit(TiltSpec(0.1), 0.7310586, 1.0) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValidationError):
        implied_selection_logit(TiltSpec(0.1), 1.0, 1.0)
    with pytest.raises(ValidationError):
        implied_selection_logit(TiltSpec(0.1), 0.5, 0.0)


def test_cap_bounded_by_cap_on_dense_grid():
    s = SmoothCapAbove(4000, 200)
    y = np.linspace(0, 8000, 200_001)
    assert np.all(s(y) <= 4000.0)


def test_user_table_reproduces_knots_and_is_flat_outside():
    s = UserTable((0.0, 1.0, 3.0), (2.0, -1.0, 5.0))
    assert np.array_equal(s(np.array([0.0, 1.0, 3.0])), np.array([2.0, -1.0, 5.0]))
    assert s(-10.0) == 2.0 and s(10.0) == 5.0
    assert s(2.0) == pytest.approx(2.0)


def test_invalid_tilt_functions():
    with pytest.raises(ValidationError):
        SmoothCapAbove(1.0, 0.0)
    with pytest.raises(ValidationError):
        SmoothRampAbove(1.0, -2.0)
    with pytest.raises(ValidationError):
        UserTable((0.0, 0.0), (1.0, 2.0))
    with pytest.raises(ValidationError):
        TiltSpec(float("nan"))
    with pytest.raises(ValidationError):
        TiltSpec(0.1, arm=2)


def test_config_round_trip():
    cfg = {"arm": 1, "gamma": 0.003, "s": {"kind": "smooth_cap_above", "cap": 4000, "scale": 200}}
    spec = TiltSpec.from_config(cfg)
    assert spec.to_config() == {"arm": 1, "gamma": 0.003, "s": {"kind": "smooth_cap_above", "cap": 4000.0,
                                                                 "scale": 200.0}}
    for f in (Identity(), SmoothRampAbove(2000, 2000), UserTable((0, 1), (1, 0))):
        assert tilt_function_from_config(f.to_config()) == f
    with pytest.raises(ConfigError):
        tilt_function_from_config({"kind": "spline"})
    with pytest.raises(ConfigError):
        tilt_function_from_config({"kind": "smooth_cap_above", "cap": 1})


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_gamma_zero_is_always_one(y):
    for s in (Identity(), SmoothCapAbove(4000, 200), SmoothRampAbove(2000, 2000)):
        assert exp_tilt(TiltSpec(0.0, s), y) == 1.0
