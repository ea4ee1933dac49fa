import numpy as np
import pytest
from scipy.special import expit, log_expit

from histoage.epi.logistic import accuracy, cv_accuracy, cv_predict_proba, fit_logistic
from histoage.utils.errors import DataError

X_SYM = np.array([-2.0, -1.0, 1.0, 2.0])


def test_single_class_is_refused():
    with pytest.raises(DataError):
        fit_logistic(X_SYM, [1, 1, 1, 1])
    with pytest.raises(DataError):
        fit_logistic(X_SYM, [0, 1, 2, 1])


def test_symmetric_data_gives_zero_intercept():
    fit = fit_logistic(X_SYM, [0, 1, 0, 1])
    assert fit.converged
    assert abs(fit.intercept) < 1e-8


def test_ridge_solution_matches_grid_search():
    y = np.array([0, 0, 1, 1])
    fit = fit_logistic(X_SYM, y, ridge=0.5, fit_intercept=False)
    grid = np.arange(0.0, 10.0, 1e-4)
    signed = np.where(y == 1, 1.0, -1.0) * X_SYM
    objective = log_expit(grid[:, None] * signed[None, :]).sum(axis=1) - 0.25 * grid ** 2
    assert fit.coef[0] == pytest.approx(grid[np.argmax(objective)], abs=1e-3)


def test_newton_never_goes_below_the_start(rng):
    X = rng.normal(size=(50, 2))
    y = (rng.random(50) < expit(X @ [1.5, -1.0])).astype(int)
    fit = fit_logistic(X, y)
    assert fit.objective >= 50 * np.log(0.5)
    assert fit.converged


def test_iteration_cap_reports_non_convergence(rng):
    X = rng.normal(size=(50, 2))
    y = (rng.random(50) < expit(X @ [1.5, -1.0])).astype(int)
    fit = fit_logistic(X, y, max_iter=1)
    assert not fit.converged
    assert fit.iterations == 1


def test_folds_shrink_to_the_minority_count(rng):
    X = rng.normal(size=20)
    y = np.zeros(20, dtype=int)
    y[:3] = 1
    probabilities, used = cv_predict_proba(X, y, folds=5)
    assert used == 3
    assert np.all((probabilities > 0) & (probabilities < 1))
    y[1:3] = 0
    with pytest.raises(DataError):
        cv_predict_proba(X, y)


def test_informative_predictor_beats_chance(rng):
    X = rng.normal(size=400)
    y = (rng.random(400) < expit(4.0 * X)).astype(int)
    assert cv_accuracy(X, y, folds=5, seed=2) > 0.75
    assert accuracy(fit_logistic(X, y), X, y) > 0.75
