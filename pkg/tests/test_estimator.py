import math

import numpy as np
import pytest
from scipy.special import expit

from oracles import DiscreteWorld, GridNormalLaw, enumerate_psi, huber_grid_oracle, two_point_world
from tiltsens.dataset import Dataset, ObservationRecord, make_folds
from tiltsens.estimator import (
    EstimatorOptions,
    NuisanceBundle,
    crossfit_estimate,
    eif,
    fit_folds,
    huber_threshold,
    huberize,
    induced_mean,
    onestep,
    psi_plugin,
    remainder,
    report_from_folds,
    sensitivity_grid,
    variance_psi,
)
from tiltsens.outcome_cdf import DiscreteConditionalLaw, SingleIndexSettings, fit_single_index
from tiltsens.propensity import FunctionPropensity, PropensitySettings, fit_propensity
from tiltsens.tilting import Identity, TiltSpec

FAST = EstimatorOptions(PropensitySettings(penalty_grid=(0.1, 1.0), cycles=1),
                        SingleIndexSettings(restarts=1, h_grid_size=9))


def _saturated(ds):
    """Nuisances equal to empirical cell frequencies of a binary-X table."""
    cells = np.unique(ds.X[:, 0])
    support = np.unique(ds.y)
    pi1 = np.array([ds.t[ds.X[:, 0] == c].mean() for c in cells])
    laws = {}
    for t in (0, 1):
        probs = []
        for c in cells:
            yy = ds.y[(ds.X[:, 0] == c) & (ds.t == t)]
            probs.append([np.mean(yy == v) for v in support])
        laws[t] = DiscreteConditionalLaw(cells, support, probs)
    return NuisanceBundle(FunctionPropensity(lambda X: pi1[np.searchsorted(cells, X[:, 0])]), laws)


def _table_data(seed, n=400):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    t = (rng.random(n) < 0.3 + 0.4 * x).astype(int)
    y = (rng.random(n) < 0.2 + 0.3 * x + 0.3 * t).astype(float)
    return Dataset(x[:, None], t, y, ("x",))


def test_plugin_worked_value():
    w = two_point_world()
    nb = w.bundle()
    v = psi_plugin(nb, TiltSpec(math.log(2), Identity(), 1), 1, w.cells)
    assert v == pytest.approx(7 / 12, abs=1e-15)


def test_plugin_gamma_zero_is_adjustment_formula():
    rng = np.random.default_rng(0)
    from oracles import random_world

    w = random_world(rng)
    nb = w.bundle()
    xs = w.cells[[0, 1, 1, 2]]
    mu = nb.outcome[1].weights(xs) @ w.support
    assert psi_plugin(nb, TiltSpec(0.0), 1, xs) == pytest.approx(mu.mean(), abs=1e-14)


def test_plugin_constant_outcome():
    w = DiscreteWorld([[0.0], [1.0]], [0.5, 0.5], [0.3, 0.6], [4.0], {0: [[1.0], [1.0]], 1: [[1.0], [1.0]]})
    for g in (-2.0, 0.0, 0.7):
        assert psi_plugin(w.bundle(), TiltSpec(g, arm=0), 0, w.cells) == pytest.approx(4.0, abs=1e-13)


def test_eif_aipw_value_at_gamma_zero():
    nb = two_point_world().bundle()
    rec = ObservationRecord(np.array([0.0]), 1, 1.0)
    assert eif(rec, nb, TiltSpec(0.0), 1, 0.5) == pytest.approx(1.0, abs=1e-15)


def test_eif_other_arm_is_tilted_mean_minus_psi():
    nb = two_point_world().bundle()
    spec = TiltSpec(math.log(2))
    rec = ObservationRecord(np.array([0.0]), 0, 123.0)
    assert eif(rec, nb, spec, 1, 0.25) == pytest.approx(2 / 3 - 0.25, abs=1e-15)


def test_eif_exact_mean_zero_on_two_point_law():
    w = two_point_world()
    nb = w.bundle()
    spec = TiltSpec(math.log(2))
    psi = enumerate_psi(w, spec.s, spec.gamma, 1)
    total = sum(p * eif(ObservationRecord(x, t, y), nb, spec, 1, psi) for x, t, y, p in w.outcomes())
    assert abs(total) < 1e-12


def test_onestep_equals_plugin_for_saturated_fit_at_gamma_zero():
    ds = _table_data(1)
    nb = _saturated(ds)
    for t in (0, 1):
        spec = TiltSpec(0.0, arm=t)
        assert onestep(nb, spec, t, ds) == pytest.approx(psi_plugin(nb, spec, t, ds.X), abs=1e-10)


def test_onestep_constant_outcome():
    rng = np.random.default_rng(2)
    ds = Dataset(rng.integers(0, 2, 50)[:, None].astype(float), np.r_[np.ones(20), np.zeros(30)],
                 np.full(50, 2.5), ("x",))
    nb = _saturated(ds)
    for g in (0.0, 1.3):
        assert onestep(nb, TiltSpec(g), 1, ds) == pytest.approx(2.5, abs=1e-12)


def test_induced_mean_examples():
    ds = Dataset(np.zeros((4, 1)), [1, 1, 0, 0], [0.6, 0.6, 1.0, 1.0], ("x",))
    assert induced_mean(0.5, ds, 1) == pytest.approx(0.4)
    same = Dataset(np.zeros((4, 1)), [1, 1, 0, 0], [2.0, 2.0, 2.0, 2.0], ("x",))
    assert induced_mean(2.0, same, 1) == pytest.approx(2.0)
    with pytest.raises(ZeroDivisionError):
        induced_mean(1.0, Dataset(np.zeros((2, 1)), [1, 1], [1.0, 2.0], ("x",)), 1)


def test_induced_mean_matches_other_arm_plugin():
    ds = _table_data(3)
    nb = _saturated(ds)
    for t in (0, 1):
        psi = psi_plugin(nb, TiltSpec(0.0, arm=t), t, ds.X)
        other = ds.X[ds.t == 1 - t]
        mu_other = nb.outcome[t].weights(other) @ nb.outcome[t].support
        assert induced_mean(psi, ds, t) == pytest.approx(mu_other.mean(), abs=1e-12)


def test_huber_examples():
    assert huber_threshold([1, 1, 1, 1]) == pytest.approx(math.sqrt(4 / math.log(4)), rel=1e-12)
    assert huber_threshold([1, 1, 1, 1]) == pytest.approx(1.69864, abs=1e-5)
    assert huber_threshold([0, 0, 0, 0]) == 0.0
    v = [0.1, 0.1, 0.1, 100]
    tau = huber_threshold(v)
    assert tau == pytest.approx(huber_grid_oracle(v), abs=1e-6)
    lhs = sum(min(x * x, tau * tau) for x in v) / tau**2
    assert lhs == pytest.approx(math.log(4), rel=1e-9)


def test_huber_no_root_is_inf_and_noop():
    v = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0])
    assert huber_threshold(v) == math.inf
    assert np.array_equal(huberize(v, math.inf), v)
    assert np.array_equal(huberize(v, 0.0), v)


def test_huberize_is_noop_above_max():
    v = np.array([-1.0, 0.5, 2.0, 1.5])
    tau = huber_threshold(v)
    assert tau >= 2.0
    assert np.array_equal(huberize(v, tau), v)


def test_variance_examples():
    assert variance_psi([np.zeros(3)]) == 0.0
    v = variance_psi([np.array([1.0]), np.array([-1.0])])
    assert v == 1.0 and math.sqrt(v / 2) == pytest.approx(1 / math.sqrt(2))
    phi = np.array([0.3, -0.2, 0.7])
    assert variance_psi(phi - phi) == 0.0


def test_remainder_identities():
    rng = np.random.default_rng(4)
    from oracles import random_world

    w = random_world(rng)
    nb = w.bundle()
    spec = TiltSpec(0.4)
    assert abs(remainder(nb, nb, spec, 1, w.cells)) < 1e-12
    shifted = DiscreteWorld(w.cells, w.px, np.clip(w.pi1 + 0.1, 0, 0.95), w.support, w.py)
    assert abs(remainder(shifted.bundle(), nb, spec, 1, w.cells)) < 1e-12


def test_location_equivariance_at_gamma_zero():
    rng = np.random.default_rng(5)
    from oracles import random_world

    w = random_world(rng)
    c = 17.25
    w2 = DiscreteWorld(w.cells, w.px, w.pi1, w.support + c, w.py)
    X = w.cells[rng.integers(0, 3, 40)]
    T = rng.integers(0, 2, 40)
    Y = w.support[rng.integers(0, len(w.support), 40)]
    a = onestep(w.bundle(), TiltSpec(0.0), 1, Dataset(X, T, Y, ("x",)))
    b = onestep(w2.bundle(), TiltSpec(0.0), 1, Dataset(X, T, Y + c, ("x",)))
    assert b - a == pytest.approx(c, abs=1e-10)


def _small_data(seed, n=160):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    t = (rng.random(n) < expit(0.5 * x)).astype(int)
    y = 5.0 + x + 0.5 * t + rng.normal(size=n)
    return Dataset(x[:, None], t, y, ("x",))


def test_crossfit_constant_outcome():
    ds = _small_data(6).with_outcome(np.full(160, 3.0))
    plan = make_folds(ds, 3, 0)
    rep = crossfit_estimate(ds, plan, TiltSpec(0.5, arm=1), TiltSpec(-0.2, arm=0), FAST)
    assert rep.psi_tilde[1] == pytest.approx(3.0, abs=1e-12)
    assert rep.psi_tilde[0] == pytest.approx(3.0, abs=1e-12)
    assert rep.ace == pytest.approx(0.0, abs=1e-12)


def test_report_invariants_and_fold_table():
    ds = _small_data(7)
    plan = make_folds(ds, 4, 1)
    rep = crossfit_estimate(ds, plan, TiltSpec(0.3, arm=1), TiltSpec(0.0, arm=0), FAST)
    assert rep.ace == rep.psi_tilde[1] - rep.psi_tilde[0]
    assert all(v >= 0 for v in rep.se.values())
    for q, est in (("psi1", rep.psi_tilde[1]), ("psi0", rep.psi_tilde[0]), ("ace", rep.ace)):
        lo, hi = rep.ci[q]["normal"]
        assert lo <= est <= hi
    assert len(rep.per_fold) == 8
    assert set(rep.per_fold.columns) >= {"fold", "arm", "estimate", "tau", "n_truncated", "clip_rate"}


def test_grid_reuses_folds_and_matches_single_estimate():
    ds = _small_data(8)
    plan = make_folds(ds, 3, 2)
    folds = fit_folds(ds, plan, FAST)
    g = sensitivity_grid(ds, plan, [0.0], [0.0], Identity(), Identity(), FAST, folds=folds)
    rep = report_from_folds(folds, ds.n, TiltSpec(0.0, arm=1), TiltSpec(0.0, arm=0), FAST)
    assert len(g.table) == 1 and g.table["ace"].iloc[0] == rep.ace
    g2 = sensitivity_grid(ds, plan, [0.0, 0.1, 0.2], [0.0, -0.1, -0.2, -0.3], Identity(), Identity(), FAST,
                          folds=folds)
    assert len(g2.table) == 12 and g2.complete
    assert set(g2.table["classification"]) <= {"worse", "better", "indeterminate"}


def test_grid_marks_failed_cells_and_continues():
    ds = _small_data(9)
    plan = make_folds(ds, 3, 3)
    g = sensitivity_grid(ds, plan, [0.0, 200.0], [0.0], Identity(), Identity(), FAST)
    assert len(g.table) == 2
    assert g.table["classification"].tolist()[1] == "failed"
    assert g.table["classification"].tolist()[0] != "failed"
    assert not g.complete


def test_clip_warning():
    rng = np.random.default_rng(10)
    n = 200
    x = rng.normal(size=n)
    t = (rng.random(n) < expit(3 * x)).astype(int)
    ds = Dataset(x[:, None], t, x + rng.normal(size=n), ("x",))
    opts = EstimatorOptions(PropensitySettings(penalty_grid=(0.1, 1.0), cycles=1, clip_epsilon=0.2),
                            FAST.single_index)
    rep = crossfit_estimate(ds, make_folds(ds, 2, 0), TiltSpec(0.0, arm=1), TiltSpec(0.0, arm=0), opts)
    assert rep.clip_rate > 0.10
    assert rep.warnings


@pytest.mark.slow
def test_fold_fit_l2_distance_shrinks_with_n():
    from tiltsens.diagnostics import sample_outcomes

    pi = FunctionPropensity(lambda X: expit(0.5 * np.asarray(X)[:, 0]))
    law = GridNormalLaw(1.0, 1.0, 1.0)
    truth = NuisanceBundle(pi, {1: law, 0: law})
    spec = TiltSpec(0.4)
    rng = np.random.default_rng(11)
    dists = []
    for n in (500, 2000, 8000):
        # median over replicates: one tail propensity can dominate a single L2 draw
        reps = []
        for _ in range(5):
            x = rng.normal(size=n)
            t = (rng.random(n) < expit(0.5 * x)).astype(int)
            ds = Dataset(x[:, None], t, sample_outcomes(law, x[:, None], rng), ("x",))
            tr, te = ds.subset(np.arange(n // 2)), ds.subset(np.arange(n // 2, n))
            prop = fit_propensity(tr.X, tr.t)
            out1 = fit_single_index(tr.X[tr.t == 1], tr.y[tr.t == 1])
            phi_hat = eif(te, NuisanceBundle(prop, {1: out1, 0: out1}), spec, 1, 0.0)
            phi_true = eif(te, truth, spec, 1, 0.0)
            reps.append(math.sqrt(np.mean((phi_hat - phi_true) ** 2)))
        dists.append(np.median(reps))
    assert dists[0] > dists[1] > dists[2]
