import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nucontract import DichotomySpectrum, NonuniformContractor
from nucontract.estimators import as_system

CONFIG = 'dim = 1\nhorizon = 60\nentries = ["-2"]\n'


def test_params_round_trip():
    est = DichotomySpectrum(tol=0.1, horizon=50)
    assert est.get_params()["tol"] == 0.1
    twin = clone(est).set_params(n_coarse=16)
    assert twin.n_coarse == 16 and twin.horizon == 50


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        DichotomySpectrum().predict([0.0])
    with pytest.raises(NotFittedError):
        NonuniformContractor().transform([0.0])


def test_as_system_inputs(ex1):
    assert as_system(ex1) is ex1
    assert as_system("example2", horizon=30).horizon == 30
    assert as_system(CONFIG).dim == 1
    with pytest.raises(TypeError):
        as_system(3.0)


def test_spectrum_fit_predict():
    est = DichotomySpectrum(tol=0.05).fit(CONFIG)
    assert est.n_intervals_ == 1 and est.intervals_.shape == (1, 2)
    pred = est.predict([-5.0, -2.0, 1.0])
    assert pred.tolist() == [0, 1, 0]
    assert est.decision_function([-2.0])[0] == 0.0
    assert est.decision_function([1.0])[0] > 2.5


def test_contractor_fit_transform():
    est = NonuniformContractor(delta=0.2, tol=0.05).fit(CONFIG)
    assert est.certificate_.passed
    t = np.linspace(0, 60, 7)
    C = est.transform(t)
    assert C.shape == (7, 1) and np.all(np.abs(C + 2) <= 0.1 + 1e-12)
    B = est.perturbation(t)
    assert B.shape == (7, 1, 1)
    assert np.max(np.abs(B)) <= 0.2 * est.K_delta_eps_
    with pytest.raises(ValueError):
        est.transform([61.0])
