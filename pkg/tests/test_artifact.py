import json

import numpy as np
import pytest
from scipy.special import expit

from tiltsens.artifact import bundle_from_dict, bundle_to_dict, load_bundle, save_bundle
from tiltsens.dataset import Dataset
from tiltsens.estimator import fit_nuisances
from tiltsens.exceptions import ConfigError
from tiltsens.outcome_cdf import SingleIndexSettings
from tiltsens.propensity import PropensitySettings


@pytest.fixture(scope="module")
def bundle():
    rng = np.random.default_rng(0)
    n = 200
    X = np.column_stack([rng.normal(size=n), rng.integers(0, 2, n)])
    t = (rng.random(n) < expit(X[:, 0])).astype(int)
    y = X[:, 0] + X[:, 1] + rng.normal(size=n)
    ds = Dataset(X, t, y, ("a", "b"), (False, True))
    return fit_nuisances(ds, PropensitySettings(penalty_grid=(1.0,)), SingleIndexSettings(restarts=1)), X


def test_round_trip_predictions(bundle, tmp_path):
    nb, X = bundle
    back = load_bundle(save_bundle(nb, tmp_path / "m.json"))
    assert np.array_equal(back.pi(X, 1), nb.pi(X, 1))
    for t in (0, 1):
        assert np.array_equal(back.outcome[t].weights(X[:5]), nb.outcome[t].weights(X[:5]))


def test_save_is_byte_stable(bundle, tmp_path):
    nb, _ = bundle
    a = save_bundle(nb, tmp_path / "a.json").read_bytes()
    b = save_bundle(load_bundle(tmp_path / "a.json"), tmp_path / "b.json").read_bytes()
    assert a == b


def test_version_and_missing_file(bundle, tmp_path):
    nb, _ = bundle
    d = bundle_to_dict(nb)
    d["format_version"] = 99
    with pytest.raises(ConfigError):
        bundle_from_dict(json.loads(json.dumps(d)))
    with pytest.raises(ConfigError):
        load_bundle(tmp_path / "nope.json")
